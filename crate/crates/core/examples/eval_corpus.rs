//! Evaluate checkpoints on a directory of images and print the mean RD
//! point of each as one curve.
//!
//!     cargo run --release --example eval_corpus -- images/ a.tnwt b.tnwt ...

use std::path::Path;

use treecodec::eval::bd::RdCurve;
use treecodec::eval::corpus::evaluate_corpus;
use treecodec::model::Checkpoint;

fn main() -> treecodec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: eval_corpus <image_dir> <model.tnwt>...");
        std::process::exit(1);
    }
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut points = Vec::new();
    for path in &args[1..] {
        let ck = Checkpoint::load(Path::new(path))?;
        let ev = evaluate_corpus(&ck.model, Path::new(&args[0]), ck.lambda_index, jobs)?;
        for r in &ev.images {
            if let Some(e) = &r.error {
                eprintln!("{}: {e}", r.image);
            }
        }
        if let Some(p) = ev.mean() {
            points.push(p);
        }
    }
    print!("{}", RdCurve::new("treecodec", points)?.to_csv());
    Ok(())
}
