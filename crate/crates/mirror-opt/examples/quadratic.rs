//! Minimal library walkthrough: mirror descent on a 3-d quadratic whose
//! curvature the diagonal map matches exactly (the README example).

use mirror_opt::mirror_maps::{MirrorMap, PrimalVector};
use mirror_opt::optimizers::{run_md, ExtensionRule, RunOptions, StepSchedule};
use mirror_opt::problems::{Problem, Quadratic};

fn main() -> Result<(), mirror_opt::Error> {
    let problem = Problem::Quadratic(Quadratic::new(vec![1.0, 4.0, 9.0], vec![1.0, -2.0, 0.5])?);
    let map = MirrorMap::diagonal(vec![1.0, 4.0, 9.0])?; // match the curvature
    let schedule = StepSchedule::new(vec![0.9], ExtensionRule::ConstantMean)?;
    let x0 = PrimalVector::from_vec(vec![0.0; 3]);
    let opts = RunOptions { max_iters: 200, ..RunOptions::default() };

    let run = run_md(&map, &problem, &schedule, &x0, &opts)?;
    println!("f(x_200) = {}", run.trace.rows().last().unwrap().f);
    Ok(())
}
