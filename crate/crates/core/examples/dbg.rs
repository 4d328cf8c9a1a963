use std::cell::Cell;
use dphase_core::expr::ExprAst;
use dphase_core::nfunction::{Coupling, ExponentModel, NFunctionMode, Point};
use dphase_core::quad;

fn main() {
    let m = ExponentModel::new(
        ExprAst::parse("2 + min(1, max(0, t-1))/10").unwrap(),
        ExprAst::parse("2.6 + min(1, max(0, t-1))/10").unwrap(),
        ExprAst::parse("0.5").unwrap(),
        Coupling::Gradient, 2, None).unwrap();
    let x = Point::new(0.9538487122634394, 0.0);
    let s = 7.954527096674753_f64;
    let h = m.density(NFunctionMode::IntegralForm, x, s).unwrap();
    let conj = m.conjugate(NFunctionMode::IntegralForm, x, h, 1e-10).unwrap();
    for tol in [1e-8, 1e-10, 1e-12, 1e-14] {
        let count = Cell::new(0u64);
        let v = quad::integrate(|t| { count.set(count.get() + 1); m.eval_h(x, t) }, 0.0, s, tol).unwrap();
        println!("tol {tol:e}: H = {v:.12} ({} evals)", count.get());
    }
    let big = m.eval_big_h(NFunctionMode::IntegralForm, x, s, 1e-12).unwrap();
    println!("h={h} conj={conj} rhs={}", h*s - big);
}
