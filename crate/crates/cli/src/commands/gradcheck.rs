use ndgauss::grad::{gradcheck, GradcheckOptions, GradcheckReport};

use crate::error::CliError;

#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    pub seed: Option<u64>,
    /// Test hook: scales the analytic gradients so the check must fail.
    pub corrupt_scale: Option<f64>,
}

/// Prints a summary line, or the worst coordinates on failure.
pub fn format_report(report: &GradcheckReport) -> String {
    let mut s = format!(
        "gradcheck: {} coordinates, max relative error {:.3e}, 1-D closed form {:.3e} (tolerance {:.0e})\n",
        report.coordinates, report.max_rel_error, report.closed_form_error, report.rel_tol
    );
    if !report.passed() {
        s.push_str("worst coordinates:\n");
        for e in report.worst.iter().take(10) {
            s.push_str(&format!(
                "  N={} {:?} trial {} component {} {} [{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}\n",
                e.n_dims,
                e.mode,
                e.trial,
                e.coord.component,
                e.coord.block.name(e.coord.child),
                e.coord.index,
                e.analytic,
                e.numeric,
                e.rel_error
            ));
        }
    }
    s
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport, CliError> {
    let opts = GradcheckOptions {
        seed: args.seed.unwrap_or(0),
        corrupt_scale: args.corrupt_scale.unwrap_or(1.0),
        ..Default::default()
    };
    Ok(gradcheck(&opts)?)
}
