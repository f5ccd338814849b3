use clap::{Args, ValueEnum};
use transducer::selfcheck::{render_report, run_all, Fault, SelfcheckOptions};

use crate::SelfcheckFailed;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InjectedFault {
    CorruptGradient,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 500)]
    instances: usize,
    /// Test hook: sabotage the implementation under test.
    #[arg(long, hide = true)]
    inject_fault: Option<InjectedFault>,
}

pub fn run(args: SelfcheckArgs) -> anyhow::Result<()> {
    let options = SelfcheckOptions {
        seed: args.seed,
        instances: args.instances.max(1),
        fault: args.inject_fault.map(|f| match f {
            InjectedFault::CorruptGradient => Fault::CorruptGradient,
        }),
    };
    let outcomes = run_all(&options);
    print!("{}", render_report(&outcomes));
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!(
        "{} of {} checks passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        return Err(SelfcheckFailed(failed).into());
    }
    Ok(())
}
