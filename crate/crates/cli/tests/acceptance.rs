//! End-to-end acceptance checks. Runs without the libtest harness so each
//! check prints exactly one PASS/FAIL line, in order.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ifrp_core::autograd::gradcheck::{numeric_gradient, relative_error, DEFAULT_STEP};
use ifrp_core::autograd::Tape;
use ifrp_core::dataset::{
    apply_affine, builtin_stylizer, center_crop_resize, record_seed, sample_misalignment, synthetic_face,
    MisalignmentRanges,
};
use ifrp_core::eval::{fcr, frr, fsim, psnr, ssim, Embedder, Labelled, PixelEmbedder};
use ifrp_core::image::{from_network_batch, to_network_batch};
use ifrp_core::losses::{decay_schedule, value, ExtractorSpec, LossWeights, DECAY_RATE};
use ifrp_core::stn::{bilinear_sample, warp};
use ifrp_core::style::{log_euclidean_distance, rank_styles, StyleDescriptor};
use ifrp_core::trainer::{build_loss_graph, recover, train, PairSet, TrainConfig, TrainOptions, TrainState};
use ifrp_core::{Dn, DnConfig, ImageTensor, Srn, SrnConfig, Tensor, TransformParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("gradients", gradients),
        ("stn", stn),
        ("metrics", metrics),
        ("log-euclidean", log_euclidean),
        ("style ranking", style_ranking),
        ("schedules", schedules),
        ("overfit", overfit),
        ("retrieval", retrieval),
        ("smoke pipeline", smoke),
    ];
    // `cargo test --test acceptance -- NAME` runs only matching checks.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {detail}", i + 1)
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

fn gradients() -> Check {
    let budget = Duration::from_secs(120);
    let t = Instant::now();
    let cfg = SrnConfig {
        image_size: 8,
        base_channels: 2,
        depth: 3,
        ..SrnConfig::default()
    };
    let mut srn = Srn::build(cfg.clone(), 4).map_err(|e| e.to_string())?;
    let mut dn = Dn::build(DnConfig::matching(&cfg), 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Transformers start exactly at the identity, where every sample lands
    // on a pixel centre and bilinear sampling has a kink, and their small
    // initial weights keep ReLU inputs within a step of zero. Check at a
    // generic point instead.
    let loc: Vec<_> = srn.params.ids().filter(|&id| srn.params.name(id).starts_with("stn")).collect();
    let finals: Vec<_> = srn.stns().iter().flat_map(|(_, l)| [l.final_layer().weight, l.final_layer().bias]).collect();
    for id in loc {
        let std = if finals.contains(&id) { 0.05 } else { 0.3 };
        let t = srn.params.get(id);
        let moved = t.zip_map(&Tensor::randn(t.shape(), std, &mut rng), |a, b| a + b);
        *srn.params.get_mut(id) = moved;
    }
    let sf = Tensor::uniform(&[4, 3, 8, 8], -1.0, 1.0, &mut rng);
    let rf = Tensor::uniform(&[4, 3, 8, 8], -1.0, 1.0, &mut rng);
    let psi = ExtractorSpec::default().build().map_err(|e| e.to_string())?;
    let (lambda, eta) = (0.3, 0.2);

    let g = build_loss_graph(&srn, &dn, psi.as_ref(), &sf, &rf, lambda, eta).map_err(|e| e.to_string())?;
    let losses = [g.pix, g.id, g.dis, g.total];
    let names = ["L_pix", "L_id", "L_dis", "L_SNR"];
    // analytic[loss][net] flattened over every parameter in store order.
    let mut analytic = vec![[Vec::new(), Vec::new()]; 4];
    for (li, &l) in losses.iter().enumerate() {
        let grads = g.tape.backward(l);
        for (ni, (bound, store)) in [(&g.g_params, &srn.params), (&g.d_params, &dn.params)].into_iter().enumerate() {
            let by_id: BTreeMap<usize, _> = bound.iter().map(|(p, v)| (p.index(), *v)).collect();
            for pid in store.ids() {
                let n = store.get(pid).len();
                match by_id.get(&pid.index()).and_then(|&v| grads.get(v)) {
                    Some(t) => analytic[li][ni].extend_from_slice(t.data()),
                    None => analytic[li][ni].extend(std::iter::repeat_n(0.0, n)),
                }
            }
        }
    }
    drop(g);

    let eval = |srn: &Srn, dn: &Dn| -> [f64; 4] {
        let g = build_loss_graph(srn, dn, psi.as_ref(), &sf, &rf, lambda, eta).expect("loss graph");
        [g.pix, g.id, g.dis, g.total].map(|v| g.tape.value(v).item())
    };
    let h = DEFAULT_STEP;
    let mut numeric = vec![[Vec::new(), Vec::new()]; 4];
    let mut count = [0usize; 2];
    for ni in 0..2 {
        let ids: Vec<_> = if ni == 0 { srn.params.ids().collect() } else { dn.params.ids().collect() };
        for pid in ids {
            let n = if ni == 0 { srn.params.get(pid).len() } else { dn.params.get(pid).len() };
            for i in 0..n {
                let set = |s: &mut Srn, d: &mut Dn, v: f64| {
                    let t = if ni == 0 { s.params.get_mut(pid) } else { d.params.get_mut(pid) };
                    t.data_mut()[i] = v;
                };
                let orig = if ni == 0 { srn.params.get(pid).data()[i] } else { dn.params.get(pid).data()[i] };
                set(&mut srn, &mut dn, orig + h);
                let plus = eval(&srn, &dn);
                set(&mut srn, &mut dn, orig - h);
                let minus = eval(&srn, &dn);
                set(&mut srn, &mut dn, orig);
                for li in 0..4 {
                    numeric[li][ni].push((plus[li] - minus[li]) / (2.0 * h));
                }
            }
            count[ni] += n;
        }
    }
    let mut worst = 0.0f64;
    let mut report = Vec::new();
    for li in 0..4 {
        for ni in 0..2 {
            let e = rel(&analytic[li][ni], &numeric[li][ni]);
            worst = worst.max(e);
            if e > 1e-3 {
                report.push(format!("{} wrt {}: {e:.2e}", names[li], ["G", "D"][ni]));
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(report.is_empty(), format!("relative error above 1e-3: {}", report.join(", ")))?;
    ensure(elapsed < budget, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} G and {} D params, worst relative error {worst:.2e}",
        count[0], count[1]
    ))
}

fn smooth_image(size: usize, seed: u64) -> ImageTensor {
    center_crop_resize(&synthetic_face(seed, 0, 218, 178), size).expect("crop")
}

fn stn() -> Check {
    let img = smooth_image(64, 2);
    let x = to_network_batch(std::slice::from_ref(&img)).map_err(|e| e.to_string())?;
    let same = warp(&x, &[TransformParams::default()]).map_err(|e| e.to_string())?;
    let id_err = x.data().iter().zip(same.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(id_err <= 1e-6, format!("identity warp error {id_err:e}"))?;

    let mut worst: f64 = 0.0;
    for deg in [-45.0f64, -30.0, -10.0, 0.0, 20.0, 45.0] {
        for scale in [0.7f64, 0.85, 1.0, 1.15, 1.3] {
            for (tx, ty) in [(0.0, 0.0), (0.1, -0.15)] {
                let p = TransformParams::new(scale.ln(), deg.to_radians(), tx, ty);
                let back = warp(&warp(&x, &[p.inverse()]).map_err(|e| e.to_string())?, &[p]).map_err(|e| e.to_string())?;
                let out = &from_network_batch(&back).map_err(|e| e.to_string())?[0];
                let (mut sum, mut n) = (0.0, 0usize);
                for y in 16..48 {
                    for xx in 16..48 {
                        let (a, b) = (img.pixel(y, xx), out.pixel(y, xx));
                        sum += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>();
                        n += 3;
                    }
                }
                worst = worst.max(sum / n as f64);
            }
        }
    }
    ensure(worst < 0.02, format!("round-trip interior MAE {worst:.4}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
    let g0 = Tensor::uniform(&[2, 6, 6, 2], -1.1, 1.1, &mut rng);
    let w = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
    let loss = |x: &Tensor, g: &Tensor| {
        let out = bilinear_sample(x, g).expect("sample");
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut tape = Tape::new();
    let xv = tape.param(x0.clone());
    let gv = tape.param(g0.clone());
    let out = tape.grid_sample(xv, gv);
    let wv = tape.constant(w.clone());
    let zero = tape.constant(Tensor::zeros(w.shape()));
    // <out, w> = len/4 * (mean((out+w)^2) - mean((out-w)^2))
    let plus = tape.lin_comb(&[(out, 1.0), (wv, 1.0)]);
    let minus = tape.lin_comb(&[(out, 1.0), (wv, -1.0)]);
    let a = tape.mean_squared_diff(plus, zero);
    let b = tape.mean_squared_diff(minus, zero);
    let len = w.len() as f64;
    let total = tape.lin_comb(&[(a, len / 4.0), (b, -len / 4.0)]);
    let grads = tape.backward(total);
    let ex = relative_error(
        grads.get(xv).ok_or("no input gradient")?,
        &numeric_gradient(&x0, DEFAULT_STEP, |x| loss(x, &g0)),
    );
    let eg = relative_error(
        grads.get(gv).ok_or("no grid gradient")?,
        &numeric_gradient(&g0, DEFAULT_STEP, |g| loss(&x0, g)),
    );
    ensure(ex < 1e-4 && eg < 1e-4, format!("sampler gradient errors {ex:.2e} / {eg:.2e}"))?;
    Ok(format!(
        "identity {id_err:.1e}, worst round-trip MAE {worst:.4}, sampler grad errors {ex:.1e}/{eg:.1e}"
    ))
}

fn to_rgb(img: &ImageTensor) -> oracles::Rgb {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.pixel(y, x)).collect()).collect()
}

fn textured(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    let (fx, fy, ph): (f64, f64, f64) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.0..6.0));
    ImageTensor::from_fn(size, size, |y, x| {
        let base = 0.5 + 0.35 * ((x as f64 * fx + ph).sin() * (y as f64 * fy).cos());
        let edge = if x > size / 2 { 0.15 } else { 0.0 };
        let v = (base + edge + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        [v, (v * 0.8 + 0.1).clamp(0.0, 1.0), (1.0 - v).clamp(0.0, 1.0)]
    })
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let mut random = || ImageTensor::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
        let (a, b) = (random(), random());
        let (ra, rb) = (to_rgb(&a), to_rgb(&b));
        dp = dp.max((psnr(&a, &b).map_err(|e| e.to_string())? - oracles::psnr(&ra, &rb)).abs());
        ds = ds.max((ssim(&a, &b).map_err(|e| e.to_string())? - oracles::ssim(&ra, &rb)).abs());
    }
    ensure(dp < 1e-9, format!("PSNR off by {dp:e}"))?;
    ensure(ds < 1e-6, format!("SSIM off by {ds:e}"))?;

    let mut df = 0.0f64;
    for _ in 0..2 {
        let (a, b) = (textured(&mut rng, 32), textured(&mut rng, 32));
        df = df.max((fsim(&a, &b).map_err(|e| e.to_string())? - oracles::fsim(&to_rgb(&a), &to_rgb(&b))).abs());
    }
    ensure(df < 1e-4, format!("FSIM off by {df:e}"))?;

    let half = ImageTensor::filled(32, 32, 3, 0.5);
    let p = psnr(&half, &ImageTensor::filled(32, 32, 3, 0.0)).map_err(|e| e.to_string())?;
    ensure((p - 6.0206).abs() < 1e-4, format!("PSNR(0.5, 0) = {p}"))?;
    let s = ssim(&half, &ImageTensor::filled(32, 32, 3, 0.25)).map_err(|e| e.to_string())?;
    ensure((s - 0.8001).abs() < 1e-4, format!("SSIM(0.5, 0.25) = {s}"))?;
    Ok(format!(
        "max |dPSNR| {dp:.1e}, |dSSIM| {ds:.1e}, |dFSIM| {df:.1e}; PSNR {p:.4}, SSIM {s:.4}"
    ))
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.05;
    (&m + m.transpose()) * 0.5
}

fn log_euclidean() -> Check {
    let eps = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = |a: &DMatrix<f64>, b: &DMatrix<f64>| log_euclidean_distance(a, b, eps).map_err(|e| e.to_string());
    let mut worst_tri = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(2..6);
        let (a, b, c) = (random_spd(n, &mut rng), random_spd(n, &mut rng), random_spd(n, &mut rng));
        let (ab, ba) = (d(&a, &b)?, d(&b, &a)?);
        ensure(ab == ba, format!("asymmetric: {ab} vs {ba}"))?;
        ensure(d(&a, &a)? <= 1e-9, "d(A, A) above 1e-9")?;
        worst_tri = worst_tri.max(ab - d(&a, &c)? - d(&c, &b)?);
    }
    ensure(worst_tri <= 1e-9, format!("triangle violated by {worst_tri:e}"))?;
    let e2 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![std::f64::consts::E.powi(2), 1.0]));
    let two = log_euclidean_distance(&DMatrix::identity(2, 2), &e2, 1e-15).map_err(|e| e.to_string())?;
    ensure((two - 2.0).abs() < 1e-9, format!("d(I, diag(e^2, 1)) = {two}"))?;
    Ok(format!("100 triples, worst triangle slack {worst_tri:.2e}, d = {two:.12}"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn style_ranking() -> Check {
    // Every Gram shares one eigenbasis, so the log-Euclidean distance is the
    // Euclidean distance between log-eigenvalue vectors.
    let theta: f64 = 0.4;
    let q = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
    let gram = |l: [f64; 2]| &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(l.to_vec())) * q.transpose();
    let real = [1.0, 1.0];
    let specs: [(&str, [f64; 2]); 5] = [
        ("ink", [2.0, 1.0]),
        ("candy", [0.4, 1.0]),
        ("blur", [1.0, 4.0]),
        ("anime", [2.0, 1.0]),
        ("mosaic", [1.0, 0.25]),
    ];
    let eps = 1e-9;
    let dist = |l: [f64; 2]| {
        ((l[0] + eps).ln() - (real[0] + eps).ln()).hypot((l[1] + eps).ln() - (real[1] + eps).ln())
    };
    let real_grams = vec![vec![gram(real)]];
    // "ink" and "anime" are exact duplicates; every other gap is large.
    let mut checked = 0;
    for perm in permutations(specs.len()) {
        let order: Vec<_> = perm.iter().map(|&i| specs[i]).collect();
        let styles = order
            .iter()
            .map(|(id, l)| StyleDescriptor::new(*id, vec![gram(*l)]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        for k in 1..=specs.len() {
            let got = rank_styles(&styles, real_grams.clone(), k, Some(eps)).map_err(|e| e.to_string())?;
            // Position of each style = number of styles that must precede it.
            let mut want = vec![""; specs.len()];
            for (id, l) in &order {
                let pos = order
                    .iter()
                    .filter(|(o, m)| {
                        let (dm, dl) = (dist(*m), dist(*l));
                        dm > dl + 1e-9 || ((dm - dl).abs() <= 1e-9 && o < id)
                    })
                    .count();
                want[pos] = id;
            }
            ensure(
                got.iter().map(String::as_str).eq(want[..k].iter().copied()),
                format!("k={k}, order {perm:?}: got {got:?}, want {:?}", &want[..k]),
            )?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (permutation, k) cases match"))
}

fn schedules() -> Check {
    let w = LossWeights::default();
    ensure(w.lambda(0) == 1e-2, format!("lambda^0 = {}", w.lambda(0)))?;
    let mut prev = f64::INFINITY;
    let mut floor = None;
    for n in 0..1000u64 {
        let l = w.lambda(n);
        ensure(l <= prev, format!("lambda increases at n={n}"))?;
        prev = l;
        if floor.is_none() && (l - 5e-3).abs() < 1e-15 && 1e-2 * DECAY_RATE.powi(n as i32) <= 5e-3 {
            floor = Some(n);
        }
    }
    ensure(floor == Some(139), format!("first floor epoch {floor:?}"))?;
    ensure(decay_schedule(1e-2, 138, DECAY_RATE) > 5e-3, "floor reached before n=139")?;
    let dis = value::discriminator_loss(&[0.5; 4], &[0.5; 4]);
    ensure((dis - 2.0 * std::f64::consts::LN_2).abs() < 1e-9, format!("L_dis at 0.5 = {dis}"))?;
    Ok(format!("floor at n=139, L_dis(0.5) = {dis:.12}"))
}

fn overfit_pairs() -> Vec<(ImageTensor, ImageTensor)> {
    let styles = ["sketch", "candy", "mosaic"];
    (0..16u64)
        .map(|i| {
            let rf = center_crop_resize(&synthetic_face(3, i, 218, 178), 32).expect("crop").quantized();
            let p = sample_misalignment(record_seed(3, &i.to_string(), "overfit"), &MisalignmentRanges::default());
            let st = builtin_stylizer(styles[i as usize % 3]).expect("stylizer");
            let sf = st.stylize(&apply_affine(&rf, &p).expect("warp")).expect("stylize").quantized();
            (sf, rf)
        })
        .collect()
}

fn overfit() -> Check {
    let budget = Duration::from_secs(15 * 60);
    let t = Instant::now();
    let pairs = overfit_pairs();
    let data = PairSet::from_images(&pairs, 32).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig {
        epochs: 2000,
        seed: 1,
        ..TrainConfig::default()
    };
    // Pixel and identity terms only; see the README on the adversarial term.
    cfg.loss_weights.lambda0 = 0.0;
    let psi = cfg.extractor.build().map_err(|e| e.to_string())?;
    let state = TrainState::new(cfg).map_err(|e| e.to_string())?;
    let out = train(state, &data, psi.as_ref(), &TrainOptions { out_dir: None }).map_err(|e| e.to_string())?;
    ensure(out.metrics.len() == 2000, format!("{} steps", out.metrics.len()))?;
    let (first, last) = (out.metrics[0].l_pix, out.metrics[1999].l_pix);
    let sf: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
    let rec = recover(&out.state.srn, &sf).map_err(|e| e.to_string())?;
    let mut mean = 0.0;
    for (r, p) in rec.iter().zip(&pairs) {
        mean += psnr(r, &p.1).map_err(|e| e.to_string())? / pairs.len() as f64;
    }
    let elapsed = t.elapsed();
    let ratio = last / first;
    let detail = format!("L_pix ratio {ratio:.4}, mean PSNR {mean:.2} dB, {:.0}s", elapsed.as_secs_f64());
    ensure(ratio < 0.1 && mean > 20.0 && elapsed < budget, detail.clone())?;
    Ok(detail)
}

fn retrieval() -> Check {
    let faces: Vec<ImageTensor> = (0..20).map(|i| smooth_image(16, 100 + i)).collect();
    let emb = faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(Labelled {
                label: format!("id{i}"),
                embedding: PixelEmbedder.embed(f)?,
            })
        })
        .collect::<ifrp_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let id_frr = frr(&emb, &emb, 5).map_err(|e| e.to_string())?;
    let by_style: BTreeMap<String, Vec<Labelled>> =
        [("a".to_string(), emb.clone()), ("b".to_string(), emb.clone())].into_iter().collect();
    let id_fcr = fcr(&by_style, 5).map_err(|e| e.to_string())?;
    ensure(id_frr == 100.0 && id_fcr == 100.0, format!("identity FRR {id_frr}, FCR {id_fcr}"))?;

    let (n, k, trials) = (100, 5, 50);
    let (mut mfrr, mut mfcr) = (0.0, 0.0);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut set = || -> Vec<Labelled> {
            (0..n)
                .map(|i| Labelled {
                    label: format!("id{i}"),
                    embedding: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect()
        };
        let (gallery, queries) = (set(), set());
        mfrr += frr(&queries, &gallery, k).map_err(|e| e.to_string())? / trials as f64;
        let styles: BTreeMap<String, Vec<Labelled>> = [("a".to_string(), set()), ("b".to_string(), set())].into();
        mfcr += fcr(&styles, k).map_err(|e| e.to_string())? / trials as f64;
    }
    ensure((mfrr - 5.0).abs() <= 2.0 && (mfcr - 5.0).abs() <= 2.0, format!("random FRR {mfrr:.2}%, FCR {mfcr:.2}%"))?;
    Ok(format!("identity 100%/100%, random FRR {mfrr:.2}%, FCR {mfcr:.2}%"))
}

fn run_smoke(out: &Path) -> Result<Duration, String> {
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_ifrp"))
        .args(["--seed", "7", "--log", "warn", "smoke", "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), format!("smoke exited with {status}"))?;
    Ok(t.elapsed())
}

fn smoke() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ta = run_smoke(&a)?;
    let tb = run_smoke(&b)?;
    ensure(ta.max(tb) < Duration::from_secs(300), format!("runs took {ta:?} and {tb:?}"))?;
    for file in ["data/manifest.json", "train/metrics.csv", "report.json"] {
        let read = |root: &Path| std::fs::read(root.join(file)).map_err(|e| format!("{file}: {e}"));
        ensure(read(&a)? == read(&b)?, format!("{file} differs between runs"))?;
    }
    Ok(format!("two runs in {:.1}s and {:.1}s, outputs identical", ta.as_secs_f64(), tb.as_secs_f64()))
}
