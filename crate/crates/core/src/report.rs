//! Machine-readable pass/fail records for inequality and hypothesis checks.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// Outcome of one randomized check. `worst_margin` is the smallest slack seen
/// over all samples; negative means the inequality was violated. The margin
/// is absolute for bounded quantities and relative (scaled by
/// `1 + max(|lhs|, |rhs|)`) for unbounded ones — `relative_margin` records
/// which convention applies.
#[derive(Debug, Clone)]
pub struct Report {
    pub check: String,
    pub samples: u64,
    pub passes: u64,
    pub worst_margin: f64,
    pub worst_sample: String,
    /// raw numeric inputs of the worst sample, for standalone re-evaluation
    pub worst_inputs: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
    pub relative_margin: bool,
}

impl Report {
    pub fn new(check: impl Into<String>, tolerance: f64, relative_margin: bool) -> Self {
        Report {
            check: check.into(),
            samples: 0,
            passes: 0,
            worst_margin: f64::INFINITY,
            worst_sample: String::new(),
            worst_inputs: Vec::new(),
            tolerance,
            passed: true,
            relative_margin,
        }
    }

    /// Record one sample with its margin (slack above the tolerance line).
    pub fn record(&mut self, margin: f64, sample: impl FnOnce() -> String) {
        self.record_inputs(margin, &[], sample);
    }

    /// Like [`Report::record`] but keeping the raw inputs of the worst sample.
    pub fn record_inputs(
        &mut self,
        margin: f64,
        inputs: &[f64],
        sample: impl FnOnce() -> String,
    ) {
        self.samples += 1;
        let ok = margin >= -self.tolerance && margin.is_finite();
        if ok {
            self.passes += 1;
        }
        if margin < self.worst_margin || self.worst_sample.is_empty() {
            self.worst_margin = margin;
            self.worst_sample = sample();
            self.worst_inputs = inputs.to_vec();
        }
        self.passed = self.passes == self.samples;
    }

    /// Serialized line. Field order is fixed: check, samples, passes,
    /// worst_margin, tolerance, passed. Numbers use shortest round-trip
    /// decimal form.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{{\"check\": \"{}\", \"samples\": {}, \"passes\": {}, \"worst_margin\": {}, \"tolerance\": {}, \"passed\": {}}}",
            self.check, self.samples, self.passes,
            fmt_f64(self.worst_margin), fmt_f64(self.tolerance), self.passed
        )
        .unwrap();
        s
    }
}

/// Shortest round-trip decimal: the shorter of positional and exponential
/// renderings (ties go positional). Infinities are spelled out so the line
/// stays parseable.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        let plain = format!("{v}");
        let sci = format!("{v:e}");
        if sci.len() < plain.len() {
            sci
        } else {
            plain
        }
    } else if v.is_nan() {
        "\"nan\"".to_string()
    } else if v > 0.0 {
        "\"inf\"".to_string()
    } else {
        "\"-inf\"".to_string()
    }
}

/// Write reports one per line, UTF-8, LF endings.
pub fn write_reports(path: &Path, reports: &[Report]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        out.write_all(r.to_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_is_fixed() {
        let mut r = Report::new("young", 1e-9, true);
        r.record(0.5, || "t=1".into());
        r.record(0.25, || "t=2".into());
        assert_eq!(
            r.to_line(),
            "{\"check\": \"young\", \"samples\": 2, \"passes\": 2, \"worst_margin\": 0.25, \"tolerance\": 1e-9, \"passed\": true}"
        );
        assert_eq!(r.worst_sample, "t=2");
    }

    #[test]
    fn violations_flip_passed() {
        let mut r = Report::new("x", 1e-9, false);
        r.record(-1e-3, || "bad".into());
        assert!(!r.passed);
        assert_eq!(r.passes, 0);
    }
}
