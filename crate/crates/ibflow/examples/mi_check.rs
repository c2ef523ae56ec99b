//! Validate the mutual-information upper bound against analytic
//! correlated-Gaussian ground truth.
//!
//! For jointly Gaussian (x, ω) with per-dimension correlation ρ, the true
//! mutual information is −½·ln(1−ρ²) per dimension. Feeding the estimator
//! the *exact* conditional log-likelihood log p(x|ω) lets us check its
//! defining property in isolation: the estimate must sit at or above the
//! true MI (it is an upper bound), and at ρ = 0 it must vanish. The same
//! estimator consumes the flow's learned likelihoods during training.
//!
//! Run with: cargo run --release --example mi_check

use ibflow::miest::{
    club_scored, gaussian_loglik, gaussian_mi_oracle, gaussian_pairs, NegativeMode,
};
use ibflow::seeds;

fn main() -> ibflow::Result<()> {
    let batch = 20_000;
    let dims = 1;
    println!("batch = {batch}, exact Gaussian scorer, estimate = positive − negative term\n");
    println!("  rho    analytic   all-pairs ± se        derangement ± se      bound holds");

    for (i, &rho) in [0.0, 0.3, 0.6, 0.9].iter().enumerate() {
        let analytic = gaussian_mi_oracle(rho, dims)?;
        let mut rng = seeds::stream(2024, &format!("mi/{i}"));
        let (xs, ws) = gaussian_pairs(&mut rng, batch, dims, rho);

        // Score with the closed-form conditional likelihood. The all-pairs
        // mode averages the unpaired term over every (i, j); the
        // derangement mode samples one mismatched partner per row — the
        // O(B) estimator the training loop uses.
        let ll = |i: usize, j: usize| Ok(gaussian_loglik(xs.row(i), ws.row(j), rho));
        let (full, se_full) = club_scored(batch, NegativeMode::AllPairs, 77, ll)?;
        let ll = |i: usize, j: usize| Ok(gaussian_loglik(xs.row(i), ws.row(j), rho));
        let (der, se_der) = club_scored(batch, NegativeMode::Derangement, 77, ll)?;

        // An upper bound may overshoot but must not undershoot by more
        // than sampling noise (3 standard errors here).
        let holds = full.value >= analytic - 3.0 * se_full && der.value >= analytic - 3.0 * se_der;
        println!(
            "  {rho:.1}    {analytic:.4}     {:.4} ± {:.4}      {:.4} ± {:.4}     {}",
            full.value,
            se_full,
            der.value,
            se_der,
            if holds { "yes" } else { "NO" }
        );
    }

    println!("\nthe gap above the analytic value is the bound's looseness;");
    println!("it shrinks as the scorer's conditional density gets sharper.");
    Ok(())
}
