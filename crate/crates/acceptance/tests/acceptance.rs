use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with('A'))
        .collect();
    let mut out = std::io::stdout();
    let outcomes: Vec<_> = if only.is_empty() {
        mlq_acceptance::run_all(&mut |o| {
            let _ = writeln!(out, "{}", o.line());
        })
    } else {
        mlq_acceptance::run_all_matching(&only, &mut |o| {
            let _ = writeln!(out, "{}", o.line());
        })
    };
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let _ = writeln!(
        out,
        "acceptance: {} passed, {failed} failed",
        outcomes.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
