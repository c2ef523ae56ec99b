//! Compare every analytic gradient path against central finite differences.
//!
//! All training gradients come from a small reverse-mode tape. Each
//! scenario builds one loss on the tape — attentive pooling alone, each
//! classification head, the flow likelihood, and the full composite
//! objective — and checks ∂loss/∂param against
//! (loss(x+h) − loss(x−h)) / 2h coordinate by coordinate. The largest
//! relative error over sampled coordinates must stay tiny. A deliberately
//! corrupted gradient shows the harness actually detects failures.
//!
//! Run with: cargo run --release --example grad_check

use ibflow::gradcheck::{build_scenario, scenario_names, CorruptedGradient};
use ibflow::trainer::gradient_check;

fn main() -> ibflow::Result<()> {
    let epsilon = 1e-5;
    let coords_per_tensor = 8;
    println!("central differences, h = {epsilon}·max(1,|x|), {coords_per_tensor} coordinates per tensor\n");

    for &name in scenario_names() {
        let mut scenario = build_scenario(name, 42)?;
        let report = gradient_check(scenario.as_mut(), epsilon, coords_per_tensor, 7)?;
        let worst = report
            .worst
            .as_ref()
            .map(|w| format!("worst at {}[{},{}]", w.tensor, w.row, w.col))
            .unwrap_or_default();
        println!(
            "  {:<6} max rel err {:.3e} over {:>3} coordinates  {worst}",
            report.scenario, report.max_rel_err, report.coords_checked
        );
    }

    // Self-test: double one analytic gradient coordinate and the check
    // must light up, otherwise the suite proves nothing.
    let corrupted = CorruptedGradient::new(build_scenario("total", 42)?);
    let mut corrupted: Box<dyn ibflow::trainer::FdScenario> = Box::new(corrupted);
    let report = gradient_check(corrupted.as_mut(), epsilon, coords_per_tensor, 7)?;
    println!(
        "\n  corrupted-gradient self-test: max rel err {:.3} ({})",
        report.max_rel_err,
        if report.max_rel_err > 1e-3 { "detected, as it must be" } else { "MISSED" }
    );
    Ok(())
}
