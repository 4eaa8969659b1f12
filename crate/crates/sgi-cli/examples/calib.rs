// calibration probe: y-level vs z-level collapse for S and S+I
use sgi_core::agent::{pretrain_with_spec, PretrainConfig};
use sgi_core::collect::{collect_random, StartMode};
use sgi_core::nets::{EncoderSpec, GraphNets, Side};
use sgi_core::objectives::ObjectiveMask;
use sgi_core::replay::gather_observations;
use sgi_core::rng::{self, stream};
use sgi_core::stats::collapse_metric;
use sgi_core::tape::Tape;

fn collapse(ckpt: &sgi_core::agent::AgentCheckpoint, data: &sgi_core::replay::ReplayDataset, on_z: bool) -> f64 {
    let mut r = rng::stream_rng(99, stream::COLLAPSE);
    let items: Vec<(usize, usize)> = (0..192)
        .map(|_| {
            let ep = rand::Rng::gen_range(&mut r, 0..data.episodes.len());
            let t = rand::Rng::gen_range(&mut r, 0..=data.episodes[ep].steps());
            (ep, t)
        })
        .collect();
    let obs = gather_observations(data, &items).unwrap();
    let mut tape = Tape::new();
    let g = GraphNets::bind(&ckpt.nets, &mut tape, &|_| false);
    let o = tape.leaf(&obs);
    let z = g.encode(&mut tape, o, Side::Online).unwrap();
    let node = if on_z { z } else { g.project(&mut tape, z, Side::Online).unwrap() };
    let d = tape.shape(node)[1];
    let rows: Vec<Vec<f64>> = (0..192).map(|i| tape.values(node)[i * d..(i + 1) * d].to_vec()).collect();
    collapse_metric(&rows, 512, 99).unwrap()
}

fn main() {
    let data = collect_random(0, 20_000, 7, StartMode::Fixed).unwrap();
    for steps in [400u32, 800] {
        for seed in 0..4u64 {
            let mut line = format!("steps {steps} seed {seed}:");
            for (label, mask) in [
                ("S", ObjectiveMask { s: true, ..Default::default() }),
                ("S+I", ObjectiveMask { s: true, i: true, ..Default::default() }),
            ] {
                let cfg = PretrainConfig {
                    steps: Some(steps),
                    batch_size: 16,
                    depth: 3,
                    mask,
                    log_every: 0,
                    seed,
                    ..PretrainConfig::default()
                };
                let out = pretrain_with_spec(&data, EncoderSpec::small_pixel(), &cfg).unwrap();
                line += &format!(
                    "  {label}: y={:.3} z={:.3}",
                    collapse(&out.checkpoint, &data, false),
                    collapse(&out.checkpoint, &data, true)
                );
            }
            println!("{line}");
        }
    }
}
