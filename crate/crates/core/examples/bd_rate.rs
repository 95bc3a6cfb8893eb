//! BD-rate between two RD curves stored as CSV (`codec,bpp,psnr,msssim`).
//! With no arguments two made-up curves are compared.
//!
//!     cargo run --release --example bd_rate -- base.csv test.csv

use std::path::Path;

use treecodec::eval::bd::{bd_rate, Metric, RdCurve, RdPoint};

fn curve(name: &str, rate_scale: f64) -> treecodec::Result<RdCurve> {
    let points = [0.15, 0.3, 0.55, 0.9]
        .iter()
        .map(|&b: &f64| RdPoint {
            bpp: b * rate_scale,
            psnr: 36.0 + 4.5 * b.log2(),
            msssim: 1.0 - 0.04 * (-1.6 * b).exp2(),
        })
        .collect();
    RdCurve::new(name, points)
}

fn main() -> treecodec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (base, test) = if args.len() == 2 {
        (RdCurve::load(Path::new(&args[0]))?, RdCurve::load(Path::new(&args[1]))?)
    } else {
        (curve("anchor", 1.0)?, curve("candidate", 0.9)?)
    };
    for metric in [Metric::Psnr, Metric::MsSsim] {
        let r = bd_rate(&base, &test, metric)?;
        println!(
            "{} vs {} ({}): {:+.2}% over [{:.4}, {:.4}]",
            test.codec,
            base.codec,
            metric.name(),
            r.percent,
            r.metric_range.0,
            r.metric_range.1
        );
    }
    Ok(())
}
