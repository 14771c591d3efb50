//! Manual performance probe: `cargo test --release --test perf_probe -- --ignored --nocapture`

use prunelab::arch::build_architecture;
use prunelab::data::{self, SyntheticKind};
use prunelab::nn;
use prunelab::optim::{self, OptimConfig};
use prunelab::store::ParamStore;
use std::time::Instant;

#[test]
#[ignore]
fn step_breakdown() {
    if std::env::var("PRUNELAB_SERIAL").is_ok() {
        prunelab::par::set_intra_op(false);
    }
    let arch = build_architecture("resnet20", 10).unwrap();
    let mut store = ParamStore::<f32>::init(&arch, 1).unwrap();
    let t = Instant::now();
    let ds = data::make_synthetic(SyntheticKind::tiny_images(), 2048, 1).unwrap();
    println!("dataset 2048 imgs: {:.2}s", t.elapsed().as_secs_f64());

    let cfg = OptimConfig::default();
    let batches: Vec<_> = data::batches(&ds, 64, 1, 0, false).unwrap().collect();
    println!("batches: {}", batches.len());

    // warmup
    let (logits, cache) = nn::forward_train(&mut store, &arch, &batches[0].images).unwrap();
    let (_, grad) = nn::cross_entropy(&logits, &batches[0].labels).unwrap();
    nn::backward(&mut store, &arch, &cache, &grad).unwrap();

    let reps = 16;
    let t = Instant::now();
    for b in batches.iter().take(reps) {
        let _ = nn::forward_train(&mut store, &arch, &b.images).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    let mut caches = Vec::new();
    for b in batches.iter().take(reps) {
        caches.push(nn::forward_train(&mut store, &arch, &b.images).unwrap());
    }
    let fwd2 = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for (b, (logits, cache)) in batches.iter().take(reps).zip(&caches) {
        let (_, grad) = nn::cross_entropy(logits, &b.labels).unwrap();
        nn::backward(&mut store, &arch, cache, &grad).unwrap();
    }
    let bwd = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps {
        optim::step(&mut store, &cfg, 0.1).unwrap();
    }
    let stp = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    let bs: Vec<_> = data::batches(&ds, 64, 1, 1, false).unwrap().collect();
    let prep = t.elapsed().as_secs_f64() / bs.len() as f64;

    println!("forward          {:>7.1} ms", fwd * 1e3);
    println!("forward (cached) {:>7.1} ms", fwd2 * 1e3);
    println!("backward         {:>7.1} ms", bwd * 1e3);
    println!("optim step       {:>7.1} ms", stp * 1e3);
    println!("batch prep       {:>7.1} ms", prep * 1e3);
    let per_step = fwd + bwd + stp + prep;
    println!(
        "per step {:.1} ms -> {:.1} s per 10k-image epoch",
        per_step * 1e3,
        per_step * 157.0
    );
}

#[test]
#[ignore]
fn conv_component_times() {
    use prunelab::nn::conv::{im2col, ConvDims};
    use prunelab::tensor::{gemm, Tensor};

    // stage-1 shape: 16 ch, 32x32, k3 s1 p1, batch of 64 handled sample-wise
    let d = ConvDims::new(16, 16, 3, 1, 1, 32, 32);
    let x: Vec<f32> = (0..16 * 32 * 32).map(|i| (i as f32 * 0.13).sin()).collect();
    let w: Vec<f32> = (0..16 * 144).map(|i| (i as f32 * 0.37).cos()).collect();
    let mut col = vec![0.0f32; 144 * 1024];
    let mut out = vec![0.0f32; 16 * 1024];

    let reps = 64 * 50;
    let t = std::time::Instant::now();
    for _ in 0..reps {
        im2col(&x, &d, &mut col);
    }
    let t_col = t.elapsed().as_secs_f64() / reps as f64;
    let t = std::time::Instant::now();
    for _ in 0..reps {
        gemm(16, 144, 1024, &w, &col, 0.0, &mut out);
    }
    let t_gemm = t.elapsed().as_secs_f64() / reps as f64;
    println!(
        "stage1 per-sample: im2col {:.0} us, gemm {:.0} us ({:.1} GF/s)",
        t_col * 1e6,
        t_gemm * 1e6,
        2.0 * 16.0 * 144.0 * 1024.0 / t_gemm / 1e9
    );

    // finite scan cost on a 4 MB activation
    let big = Tensor::<f32>::from_vec(&[64, 16, 32, 32], vec![0.5; 64 * 16 * 1024]).unwrap();
    let t = std::time::Instant::now();
    let mut acc = true;
    for _ in 0..200 {
        acc &= big.all_finite();
    }
    println!(
        "finite scan 4MB: {:.2} ms (result {acc})",
        t.elapsed().as_secs_f64() / 200.0 * 1e3
    );
}

#[test]
#[ignore]
fn thread_scaling() {
    use prunelab::tensor::gemm;
    use rayon::prelude::*;
    let w: Vec<f32> = (0..16 * 144).map(|i| (i as f32 * 0.37).cos()).collect();
    let cols: Vec<Vec<f32>> = (0..8)
        .map(|s| (0..144 * 1024).map(|i| ((i + s) as f32 * 0.1).sin()).collect())
        .collect();
    let mut outs: Vec<Vec<f32>> = vec![vec![0.0f32; 16 * 1024]; 8];

    let reps = 300;
    let t = std::time::Instant::now();
    for _ in 0..reps {
        for (o, c) in outs.iter_mut().zip(&cols) {
            gemm(16, 144, 1024, &w, c, 0.0, o);
        }
    }
    let serial = t.elapsed().as_secs_f64();
    let t = std::time::Instant::now();
    for _ in 0..reps {
        outs.par_iter_mut().zip(&cols).for_each(|(o, c)| {
            gemm(16, 144, 1024, &w, c, 0.0, o);
        });
    }
    let parallel = t.elapsed().as_secs_f64();
    println!("serial {serial:.2}s parallel {parallel:.2}s speedup {:.2}x", serial / parallel);
}

#[test]
#[ignore]
fn bandwidth_probe() {
    use rayon::prelude::*;
    // 64 MB streams
    let a = vec![1.0f32; 16 << 20];
    let mut b = vec![0.0f32; 16 << 20];
    let t = std::time::Instant::now();
    for _ in 0..5 {
        b.copy_from_slice(&a);
    }
    let gbs = 5.0 * 2.0 * 64.0 / t.elapsed().as_secs_f64() / 1e3;
    println!("memcpy single: {gbs:.1} GB/s");

    let mut halves: Vec<(&[f32], Vec<f32>)> = vec![
        (&a[..8 << 20], vec![0.0f32; 8 << 20]),
        (&a[8 << 20..], vec![0.0f32; 8 << 20]),
    ];
    let t = std::time::Instant::now();
    for _ in 0..5 {
        halves.par_iter_mut().for_each(|(src, dst)| {
            dst.copy_from_slice(src);
        });
    }
    let gbs = 5.0 * 2.0 * 64.0 / t.elapsed().as_secs_f64() / 1e3;
    println!("memcpy 2-thread: {gbs:.1} GB/s");

    // small L2-resident working set, compute-heavy
    let w: Vec<f32> = (0..64 * 576).map(|i| (i as f32 * 0.3).sin()).collect();
    let cols: Vec<Vec<f32>> = (0..2)
        .map(|s| (0..576 * 256).map(|i| ((i + s) as f32 * 0.1).cos()).collect())
        .collect();
    let mut outs = vec![vec![0.0f32; 64 * 256]; 2];
    let reps = 2000;
    let t = std::time::Instant::now();
    for _ in 0..reps {
        for (o, c) in outs.iter_mut().zip(&cols) {
            prunelab::tensor::gemm(64, 576, 256, &w, c, 0.0, o);
        }
    }
    let serial = t.elapsed().as_secs_f64();
    let t = std::time::Instant::now();
    for _ in 0..reps {
        outs.par_iter_mut().zip(&cols).for_each(|(o, c)| {
            prunelab::tensor::gemm(64, 576, 256, &w, c, 0.0, o);
        });
    }
    let parallel = t.elapsed().as_secs_f64();
    println!(
        "L2 gemm serial {serial:.2}s parallel {parallel:.2}s speedup {:.2}x ({:.1} GF/s parallel)",
        serial / parallel,
        reps as f64 * 2.0 * 2.0 * 64.0 * 576.0 * 256.0 / parallel / 1e9
    );
}

#[test]
#[ignore]
fn std_thread_scaling() {
    let w: Vec<f32> = (0..64 * 576).map(|i| (i as f32 * 0.3).sin()).collect();
    let make_col = |s: usize| -> Vec<f32> {
        (0..576 * 256).map(|i| ((i + s) as f32 * 0.1).cos()).collect()
    };
    let reps = 4000usize;
    // serial: 2 gemms per rep on one thread
    let (c1, c2) = (make_col(0), make_col(1));
    let mut o1 = vec![0.0f32; 64 * 256];
    let mut o2 = vec![0.0f32; 64 * 256];
    let t = std::time::Instant::now();
    for _ in 0..reps {
        prunelab::tensor::gemm(64, 576, 256, &w, &c1, 0.0, &mut o1);
        prunelab::tensor::gemm(64, 576, 256, &w, &c2, 0.0, &mut o2);
    }
    let serial = t.elapsed().as_secs_f64();

    // two OS threads, each doing reps gemms
    let t = std::time::Instant::now();
    std::thread::scope(|s| {
        for i in 0..2 {
            let w = &w;
            s.spawn(move || {
                let c = make_col(i);
                let mut o = vec![0.0f32; 64 * 256];
                for _ in 0..reps {
                    prunelab::tensor::gemm(64, 576, 256, w, &c, 0.0, &mut o);
                }
            });
        }
    });
    let threaded = t.elapsed().as_secs_f64();
    println!(
        "std threads: serial {serial:.2}s threaded {threaded:.2}s (same total work) speedup {:.2}x",
        serial / threaded
    );
}
