use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use splitfc::allocator::{allocate, brute_force_oracle, AllocationProblem};

use crate::{emit_json, CliError};

#[derive(Args, Debug)]
pub struct AllocateArgs {
    /// Problem JSON: a_tilde, batch, d_hat, m, budget, q_ep[, mean_ranges].
    pub problem: PathBuf,
    /// Also run the exhaustive search with levels up to this value.
    #[arg(long, value_name = "MAX_LEVEL")]
    pub oracle: Option<u64>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: AllocateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.problem)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.problem.display())))?;
    let problem: AllocationProblem =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("problem: {e}")))?;
    let a = allocate(&problem)?;
    let mut result = json!({
        "q_real": a.q_real,
        "q_int": a.q_int,
        "nu_star": a.nu_star,
        "objective_real": a.objective_real,
        "objective_int": a.objective_int,
        "bits_real": a.bits_real,
        "bits_int": a.bits_int,
        "budget": problem.budget,
        "within_budget": a.bits_int <= problem.budget,
    });
    if let Some(l_max) = args.oracle {
        let (levels, objective) = brute_force_oracle(&problem, l_max)?;
        let sandwich = [a.objective_real, objective, a.objective_int];
        result["oracle"] = json!({
            "max_level": l_max,
            "levels": levels,
            "objective": objective,
            "sandwich": sandwich,
            "sandwich_holds": sandwich[0] <= sandwich[1] * (1.0 + 1e-12) && sandwich[1] <= sandwich[2] * (1.0 + 1e-12),
        });
    }
    emit_json(&result, args.out.as_deref())
}
