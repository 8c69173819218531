//! Finite-difference check of every differentiable primitive, then of a
//! small 64-bit network.

use lesionseg::tensor::primitive_suite;
use lesionseg::unet::{network_gradient_check, ModelConfig};

fn main() -> lesionseg::Result<()> {
    for c in primitive_suite(1e-5, 0)? {
        println!(
            "{:<24} {:>5} probes  max rel err {:.2e}",
            c.name, c.report.checked, c.report.max_rel_error
        );
    }
    for attention in [false, true] {
        let cfg = ModelConfig {
            base_filters: 2,
            attention,
            ..Default::default()
        };
        let c = network_gradient_check(&cfg, 16, 100, 1e-4, 0)?;
        println!(
            "network (attention={attention:<5}) {:>5} probes  max rel err {:.2e}  ({} draws skipped near a kink)",
            c.report.checked, c.report.max_rel_error, c.kink_skipped
        );
        println!(
            "  {} zero-gradient parameters, {} probed: max |central difference| {:.1e}",
            c.zero_params, c.zero_probed, c.zero_max_numeric
        );
    }
    Ok(())
}
