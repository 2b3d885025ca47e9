use crate::ad::{Tape, Var};
use crate::error::Result;
use crate::path::TapedTrajectory;
use crate::problems::ProblemSpec;

/// Discretized FBSDE loss, summed (not averaged) over samples and steps:
///
/// ```text
/// Σ_m Σ_n |Y^{n+1} − Y^n − Φ^n Δt − (Z^n)' Σ^n ΔW^n|²  +  Σ_m |Y^N − g(X^N)|²
/// ```
pub fn compute_loss(tape: &Tape, traj: &TapedTrajectory, prob: &ProblemSpec) -> Result<Var> {
    let times = traj.grid.times();
    let dt = traj.grid.dt();
    let n_steps = traj.grid.num_steps();

    let mut total: Option<Var> = None;
    let mut push = |term: Var| -> Result<()> {
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };

    for n in 0..n_steps {
        let (x, y, z) = (traj.x[n], traj.y[n], traj.z[n]);
        let phi = prob.generator(tape, times[n], x, y, z)?;
        let mut predicted = tape.add(y, tape.scale(phi, dt[n])?)?;
        if let Some(noise) = traj.sigma_dw[n] {
            predicted = tape.add(predicted, tape.dot_rows(z, noise)?)?;
        }
        let residual = tape.sub(traj.y[n + 1], predicted)?;
        push(tape.sum_all(tape.square(residual)?)?)?;
    }

    let g = prob.terminal(tape, traj.x[n_steps])?;
    let miss = tape.sub(traj.y[n_steps], g)?;
    push(tape.sum_all(tape.square(miss)?)?)?;
    Ok(total.expect("terminal term always present"))
}
