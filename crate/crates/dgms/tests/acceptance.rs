//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. The desk-scale training runs (criteria 9, 10, 12, 13)
//! share one lazily built fixture so the expensive pipelines run once.
//!
//! Run with `cargo test -p dgms --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dgms::checkpoint::save_checkpoint;
use dgms::data::{load_cifar10_binary, synth_blobs, write_synthetic_cifar, CifarNorm, Dataset};
use dgms::gm::{
    hard_quantize, kmeans_init, responsibility, soft_quantize, GammaInit, GmComponent,
    GmInitOptions, LayerGm, PiMode,
};
use dgms::kernels::{
    dense_f32_reference, packed_conv2d, packed_dense_matmul, AccumMode, ConvTiling,
};
use dgms::metrics::{
    codebook_overhead, compression_rate, CodebookAccounting, LayerCensus, ModelCensus,
};
use dgms::model::{build_cnn, build_mlp, conv2d_naive, Model, QuantPolicy};
use dgms::pack::{pack_layer, read_packed_model, unpack_layer, write_packed_model, Layout};
use dgms::tensor::Tensor;
use dgms::train::{
    evaluate, grad_check, train, GradCheckConfig, MetricsReport, OneCycleSchedule, TrainConfig,
    TrainState,
};

fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!("criterion {criterion}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared desk-scale training fixture

struct Pipeline {
    fp32_acc: f64,
    dgms_acc: f64,
    dgms_reports: Vec<MetricsReport>,
    fp32_state: TrainState,
    dgms_state: TrainState,
    fp32_ckpt: Vec<u8>,
    dgms_ckpt: Vec<u8>,
}

struct Fixture {
    blobs_train: Dataset,
    blobs_test: Dataset,
    blobs: [Pipeline; 2],
    cifar: [Pipeline; 2],
    build_seconds: f64,
}

fn ckpt_bytes(state: &TrainState) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&path, &state.to_checkpoint()).unwrap();
    std::fs::read(&path).unwrap()
}

fn run_blobs_pipeline(train_ds: &Dataset, test_ds: &Dataset) -> Pipeline {
    let spec = build_mlp(2, 16, 2).unwrap();
    let model = Model::init(spec.clone(), 7).unwrap();
    let mut fp32 = TrainState::new_fp32(model, 7);
    let steps = train_ds.len().div_ceil(32) * 30;
    let cfg = TrainConfig::new(30, 32, OneCycleSchedule::new(0.05, steps, 0.3).unwrap());
    train(&mut fp32, train_ds, test_ds, &cfg).unwrap();
    let (fp32_acc, _) = evaluate(&fp32, test_ds).unwrap();

    let mut dgms_state = fp32.clone();
    let policy = QuantPolicy::for_model(&spec, 4, None, &[]).unwrap();
    let opts = GmInitOptions { gamma_init: GammaInit::Std, ..Default::default() };
    dgms_state.quantize_kmeans(policy, &opts).unwrap();
    let cfg = TrainConfig::new(30, 32, OneCycleSchedule::new(0.01, steps, 0.3).unwrap());
    let dgms_reports = train(&mut dgms_state, train_ds, test_ds, &cfg).unwrap();
    let (dgms_acc, _) = evaluate(&dgms_state, test_ds).unwrap();

    Pipeline {
        fp32_acc,
        dgms_acc,
        dgms_reports,
        fp32_ckpt: ckpt_bytes(&fp32),
        dgms_ckpt: ckpt_bytes(&dgms_state),
        fp32_state: fp32,
        dgms_state,
    }
}

fn run_cifar_pipeline(train_ds: &Dataset, test_ds: &Dataset) -> Pipeline {
    let spec = build_cnn(10).unwrap();
    let model = Model::init(spec.clone(), 7).unwrap();
    let mut fp32 = TrainState::new_fp32(model, 7);
    let epochs = 8;
    let steps = train_ds.len().div_ceil(64) * epochs;
    let cfg = TrainConfig::new(epochs, 64, OneCycleSchedule::new(0.05, steps, 0.3).unwrap());
    train(&mut fp32, train_ds, test_ds, &cfg).unwrap();
    let (fp32_acc, _) = evaluate(&fp32, test_ds).unwrap();

    let mut dgms_state = fp32.clone();
    let policy = QuantPolicy::for_model(&spec, 4, None, &[]).unwrap();
    dgms_state.quantize_kmeans(policy, &GmInitOptions::default()).unwrap();
    let cfg = TrainConfig::new(epochs, 64, OneCycleSchedule::new(0.01, steps, 0.3).unwrap());
    let dgms_reports = train(&mut dgms_state, train_ds, test_ds, &cfg).unwrap();
    let (dgms_acc, _) = evaluate(&dgms_state, test_ds).unwrap();

    Pipeline {
        fp32_acc,
        dgms_acc,
        dgms_reports,
        fp32_ckpt: ckpt_bytes(&fp32),
        dgms_ckpt: ckpt_bytes(&dgms_state),
        fp32_state: fp32,
        dgms_state,
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let t0 = Instant::now();
        let blobs_train = synth_blobs(2, 1000, 0.1, 42).unwrap();
        let blobs_test = synth_blobs(2, 400, 0.1, 43).unwrap();
        let blobs = [
            run_blobs_pipeline(&blobs_train, &blobs_test),
            run_blobs_pipeline(&blobs_train, &blobs_test),
        ];

        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 5000, 1000, 99).unwrap();
        let (ctrain, ctest) =
            load_cifar10_binary(dir.path(), 5000, 1000, 1, &CifarNorm::default()).unwrap();
        let cifar = [run_cifar_pipeline(&ctrain, &ctest), run_cifar_pipeline(&ctrain, &ctest)];

        Fixture {
            blobs_train,
            blobs_test,
            blobs,
            cifar,
            build_seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

fn random_mixture(rng: &mut ChaCha8Rng, k_plus_one: usize, gamma: f64, tau: f64) -> LayerGm {
    let mut comps = vec![GmComponent { pi: 1.0, mu: 0.0, gamma }];
    for _ in 1..k_plus_one {
        comps.push(GmComponent {
            pi: rng.random_range(0.2..1.0),
            mu: rng.random_range(-1.0..1.0),
            gamma,
        });
    }
    let total: f64 = comps.iter().map(|c| c.pi).sum();
    for c in &mut comps {
        c.pi /= total;
    }
    LayerGm::from_components(&comps, tau, PiMode::Simplex).unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut worst = 0.0f64;
    let mut worst_cfg = String::new();
    for run in 0..20 {
        let k_plus_one = [4usize, 8, 16][run % 3];
        let tau = [0.01, 0.1][run % 2];
        let gamma = rng.random_range(0.01..0.1);
        // h = 1e-6 keeps central-difference truncation well below the
        // comparison tolerance at the sharpest (tau, gamma) settings; the
        // truncation term scales as h^2.
        let cfg = GradCheckConfig { k_plus_one, tau, gamma, h: 1e-6, ..Default::default() };
        let report = grad_check(&cfg, rng.random_range(0..1_000_000)).unwrap();
        assert!(!report.ill_conditioned);
        if report.max_error() > worst {
            worst = report.max_error();
            worst_cfg = format!("K+1={k_plus_one} tau={tau} gamma={gamma:.3}");
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "01 gradient fidelity",
        worst <= 1e-4 && secs < 60.0,
        &format!("20 configs, worst rel err {worst:.3e} ({worst_cfg}), {secs:.1}s"),
    );
}

#[test]
fn criterion_02_limit_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11417);
    let mut checked = 0usize;
    let mut max_gap = 0.0f64;
    while checked < 100_000 {
        let k_plus_one = rng.random_range(2..9usize);
        let gamma = rng.random_range(0.05..0.5);
        let gm = random_mixture(&mut rng, k_plus_one, gamma, 1e-8);
        let w: Vec<f64> = (0..20_000).map(|_| rng.random_range(-1.5..1.5)).collect();
        let phi = responsibility(&w, &gm);
        // Keep only weights whose top-two responsibilities are separated.
        let mut kept = Vec::new();
        for (j, &wj) in w.iter().enumerate() {
            let col = phi.column(j);
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in col {
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            if top - second >= 1e-3 {
                kept.push(wj);
            }
        }
        let soft = soft_quantize(&kept, &gm);
        let hard = hard_quantize(&kept, &gm);
        let max_mu = gm.mus().iter().fold(0.0f64, |a, m| a.max(m.abs())).max(1e-300);
        for (s, h) in soft.iter().zip(&hard) {
            let gap = (s - h).abs() / max_mu;
            max_gap = max_gap.max(gap);
        }
        checked += kept.len();
    }
    verdict(
        "02 limit property",
        max_gap <= 1e-6,
        &format!("{checked} weights with margin >= 1e-3, max |soft-hard|/max|mu| = {max_gap:.2e}"),
    );
}

#[test]
fn criterion_03_cardinality() {
    let fx = fixture();
    let mut layers_checked = 0usize;
    let mut ok = true;
    let mut detail = String::new();
    for (tag, state) in [
        ("blobs", &fx.blobs[0].dgms_state),
        ("cifar", &fx.cifar[0].dgms_state),
    ] {
        let quant = state.quant.as_ref().unwrap();
        for (name, gm) in &quant.gms {
            let w = state.model.param(&format!("{name}.w")).unwrap();
            let q = hard_quantize(w.data(), gm);
            let mut distinct: Vec<f64> = q.clone();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            distinct.dedup();
            let in_codebook = distinct.iter().all(|v| gm.mus().contains(v));
            let any_zero_assigned =
                dgms::gm::hard_assign(w.data(), gm).iter().any(|&k| k == 0);
            let zero_present = !any_zero_assigned || q.contains(&0.0);
            if distinct.len() > gm.len() || !in_codebook || !zero_present {
                ok = false;
                detail = format!("{tag}/{name}: {} distinct values of K+1={}", distinct.len(), gm.len());
            }
            layers_checked += 1;
        }
    }
    if ok {
        detail = format!("{layers_checked} quantized layers within K+1 distinct centroid values");
    }
    verdict("03 quantized-set cardinality", ok, &detail);
}

#[test]
fn criterion_04_kmeans_oracle() {
    let w = [-1.0, -1.0, 0.0, 0.0, 1.0, 1.0];
    let gm = kmeans_init(&w, 3, 0, &GmInitOptions::default()).unwrap();
    let mus_ok = gm.mus() == [0.0, -1.0, 1.0];
    let pis = gm.pis();
    let pis_ok = pis.iter().all(|p| *p == 1.0 / 3.0);
    verdict(
        "04 k-means oracle",
        mus_ok && pis_ok,
        &format!("mu = {:?}, pi = {:?}", gm.mus(), pis),
    );
}

#[test]
fn criterion_05_packing_losslessness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ACC);
    let mut ok = true;
    for case in 0..200 {
        let bits = if case % 2 == 0 { 2u8 } else { 4u8 };
        let k_plus_one = rng.random_range(2..=(1usize << bits));
        let gm = random_mixture(&mut rng, k_plus_one, 0.05, 0.01);
        let n = rng.random_range(1..600usize);
        let mus = gm.mus().to_vec();
        let w: Vec<f64> = (0..n).map(|_| mus[rng.random_range(0..mus.len())]).collect();
        let layer = pack_layer("t", &w, &[n], &gm, bits, Layout::RowMajor).unwrap();
        let back = unpack_layer(&layer).unwrap();
        if back.len() != w.len()
            || w.iter().zip(&back).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            ok = false;
            break;
        }
    }

    // Container file round trip over the exported reference CNN.
    let fx = fixture();
    let packed = dgms::pack::export_packed(&fx.cifar[0].dgms_state).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("m1.qsmd");
    write_packed_model(&p1, &packed).unwrap();
    let back = read_packed_model(&p1).unwrap();
    let file_ok = back == packed && {
        let p2 = dir.path().join("m2.qsmd");
        write_packed_model(&p2, &back).unwrap();
        std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap()
    };
    verdict(
        "05 packing losslessness",
        ok && file_ok,
        "200 random layers unpack bit-exactly; QSMD round trip bit-exact",
    );
}

#[test]
fn criterion_06_kernel_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6EC);
    let mut max_rel = 0.0f64;
    let mut exact = true;
    for case in 0..100 {
        let bits = if case % 2 == 0 { 4u8 } else { 2u8 };
        let k_plus_one = rng.random_range(2..=(1usize << bits));
        let gm = random_mixture(&mut rng, k_plus_one, 0.05, 0.01);
        let mus = gm.mus().to_vec();
        if case % 3 != 0 {
            // Dense layer
            let o = rng.random_range(1..12usize);
            let i = rng.random_range(1..24usize);
            let w: Vec<f64> = (0..o * i).map(|_| mus[rng.random_range(0..mus.len())]).collect();
            let layer = pack_layer("d", &w, &[o, i], &gm, bits, Layout::RowMajor).unwrap();
            let batch = rng.random_range(1..4usize);
            let x: Vec<f32> =
                (0..batch * i).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let y = packed_dense_matmul(&x, batch, &layer, AccumMode::F32).unwrap();

            // Bit-exact against the fixed-order f32 reference.
            let wf: Vec<f32> = dgms::pack::unpack_layer_f32(&layer).unwrap();
            let ref32 = dense_f32_reference(&x, batch, &wf, None, o, i);
            exact &= y.iter().zip(&ref32).all(|(a, b)| a.to_bits() == b.to_bits());

            // Within 1e-5 of the f64 oracle.
            for n in 0..batch {
                for out in 0..o {
                    let mut acc = 0.0f64;
                    for t in 0..i {
                        acc += w[out * i + t] as f32 as f64 * x[n * i + t] as f64;
                    }
                    let got = y[n * o + out] as f64;
                    let rel = (got - acc).abs() / acc.abs().max(1.0);
                    max_rel = max_rel.max(rel);
                }
            }
        } else {
            // Conv layer
            let co = rng.random_range(1..6usize);
            let ci = rng.random_range(1..4usize);
            let k = [1usize, 3][rng.random_range(0..2usize)];
            let n = co * ci * k * k;
            let w: Vec<f64> = (0..n).map(|_| mus[rng.random_range(0..mus.len())]).collect();
            let layer =
                pack_layer("c", &w, &[co, ci, k, k], &gm, bits, Layout::OutputChannelMajor)
                    .unwrap();
            let h = rng.random_range(k..k + 6);
            let wd = rng.random_range(k..k + 6);
            let pad = rng.random_range(0..2usize);
            let stride = rng.random_range(1..3usize);
            if h + 2 * pad < k || wd + 2 * pad < k {
                continue;
            }
            let x: Vec<f32> =
                (0..ci * h * wd).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let y = packed_conv2d(
                &x,
                1,
                h,
                wd,
                &layer,
                stride,
                pad,
                ConvTiling::default(),
                AccumMode::F32,
            )
            .unwrap();
            // f64 oracle: naive 6-loop conv on the f32-cast weights.
            let xd: Vec<f64> = x.iter().map(|v| *v as f64).collect();
            let wdq: Vec<f64> = w.iter().map(|v| *v as f32 as f64).collect();
            let xt = Tensor::from_vec(&[1, ci, h, wd], xd).unwrap();
            let wt = Tensor::from_vec(&[co, ci, k, k], wdq).unwrap();
            let want = conv2d_naive(&xt, &wt, &Tensor::zeros(&[co]), stride, pad).unwrap();
            for (a, b) in y.iter().zip(want.data()) {
                let rel = ((*a as f64) - b).abs() / b.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
    }
    verdict(
        "06 kernel equivalence",
        max_rel <= 1e-5 && exact,
        &format!("100 shapes, max rel vs f64 oracle {max_rel:.2e}, fixed-order f32 bit-exact: {exact}"),
    );
}

#[test]
fn criterion_07_codebook_overhead() {
    // ResNet-18-shaped census: 19 conv layers plus the classifier.
    let mut layers: Vec<(String, usize)> = Vec::new();
    let mut add = |name: String, p: usize| layers.push((name, p));
    for b in 0..4 {
        add(format!("l1.c{b}"), 64 * 64 * 9);
    }
    for (stage, (cin, cout)) in [(64usize, 128usize), (128, 256), (256, 512)].iter().enumerate() {
        add(format!("l{}.c0", stage + 2), cin * cout * 9);
        add(format!("l{}.c1", stage + 2), cout * cout * 9);
        add(format!("l{}.ds", stage + 2), cin * cout);
        add(format!("l{}.c2", stage + 2), cout * cout * 9);
        add(format!("l{}.c3", stage + 2), cout * cout * 9);
    }
    add("fc".into(), 512 * 1000);
    let census = ModelCensus {
        layers: layers
            .into_iter()
            .map(|(name, params)| LayerCensus { name, params, quantized: true, nonzero: params })
            .collect(),
    };
    let total = census.total_params();
    let ratio = codebook_overhead(&census, 4);
    let pct = ratio * 100.0;
    verdict(
        "07 codebook overhead",
        (pct - 0.02).abs() <= 0.01,
        &format!("{} layers, {total} params, overhead {pct:.4}% (target 0.02% +/- 0.01pp)", census.quantized_layer_count()),
    );
}

#[test]
fn criterion_08_cr_sanity() {
    let dense = |nonzero: usize| ModelCensus {
        layers: vec![LayerCensus {
            name: "w".into(),
            params: 1_000_000,
            quantized: true,
            nonzero,
        }],
    };
    let cr_full = compression_rate(&dense(1_000_000), 4, CodebookAccounting::Excluded);
    let cr_sparse = compression_rate(&dense(850_000), 4, CodebookAccounting::Excluded);
    let ok = (cr_full - 8.0).abs() <= 0.01 && (cr_sparse - 9.41).abs() <= 0.01;
    verdict(
        "08 CR sanity",
        ok,
        &format!("CR(b=4, dense) = {cr_full:.3}, CR(15% sparse) = {cr_sparse:.3}"),
    );
}

#[test]
fn criterion_09_desk_scale_training() {
    let fx = fixture();
    let b = &fx.blobs[0];
    let c = &fx.cifar[0];
    let blobs_ok = b.dgms_acc >= 0.95 && b.fp32_acc - b.dgms_acc <= 0.01 + 1e-12;
    let cifar_ok = c.fp32_acc - c.dgms_acc <= 0.04 + 1e-12;
    let time_ok = fx.build_seconds <= 20.0 * 60.0;
    verdict(
        "09 desk-scale training",
        blobs_ok && cifar_ok && time_ok,
        &format!(
            "blobs fp32 {:.4} vs 4-bit {:.4} (gap {:.2}pt); cifar-format fp32 {:.4} vs 4-bit {:.4} (gap {:.2}pt); all pipelines {:.0}s",
            b.fp32_acc,
            b.dgms_acc,
            (b.fp32_acc - b.dgms_acc) * 100.0,
            c.fp32_acc,
            c.dgms_acc,
            (c.fp32_acc - c.dgms_acc) * 100.0,
            fx.build_seconds
        ),
    );
}

#[test]
fn criterion_10_mse_decline() {
    let fx = fixture();
    let reports = &fx.blobs[0].dgms_reports;
    let first = reports.first().unwrap().mse;
    let last = reports.last().unwrap().mse;
    verdict(
        "10 MSE decline",
        last <= first,
        &format!("quantization MSE epoch 1 = {first:.4e}, final epoch = {last:.4e}"),
    );
}

#[test]
fn criterion_11_sweep_k() {
    let fx = fixture();
    let storage_bits = |kp1: usize| -> u8 {
        let mut b = 1u8;
        while (1usize << b) < kp1 {
            b += 1;
        }
        b
    };
    let mut crs = Vec::new();
    for kp1 in [4usize, 8, 16] {
        let mut state = fx.blobs[0].fp32_state.clone();
        let spec = state.model.spec.clone();
        let policy = QuantPolicy::for_model(&spec, 4, Some(kp1), &[]).unwrap();
        state.quantize_kmeans(policy, &GmInitOptions::default()).unwrap();
        let steps = fx.blobs_train.len().div_ceil(32) * 10;
        let cfg = TrainConfig::new(10, 32, OneCycleSchedule::new(0.01, steps, 0.3).unwrap());
        train(&mut state, &fx.blobs_train, &fx.blobs_test, &cfg).unwrap();
        let q = state.quant.as_ref().unwrap();
        let census =
            dgms::metrics::census_from_model(&state.model, &q.gms, &q.policy).unwrap();
        let cr = compression_rate(&census, storage_bits(kp1), CodebookAccounting::Included);
        crs.push((kp1, cr));
    }
    let non_increasing = crs.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
    verdict(
        "11 sweep behavior",
        non_increasing,
        &format!("CR over K+1 in {{4,8,16}}: {crs:?} (non-increasing)"),
    );
}

#[test]
fn criterion_12_transfer() {
    let fx = fixture();
    // Domain B: different seed and spread.
    let b_train = synth_blobs(2, 1000, 0.15, 77).unwrap();
    let b_test = synth_blobs(2, 400, 0.15, 78).unwrap();
    let spec = build_mlp(2, 16, 2).unwrap();
    let model = Model::init(spec.clone(), 21).unwrap();
    let mut b_fp32 = TrainState::new_fp32(model, 21);
    let steps = b_train.len().div_ceil(32) * 30;
    let cfg = TrainConfig::new(30, 32, OneCycleSchedule::new(0.05, steps, 0.3).unwrap());
    train(&mut b_fp32, &b_train, &b_test, &cfg).unwrap();

    // Native DGMS on domain B (its own k-means init).
    let mut native = b_fp32.clone();
    let policy = QuantPolicy::for_model(&spec, 4, None, &[]).unwrap();
    native.quantize_kmeans(policy.clone(), &GmInitOptions::default()).unwrap();
    let cfg = TrainConfig::new(30, 32, OneCycleSchedule::new(0.01, steps, 0.3).unwrap());
    train(&mut native, &b_train, &b_test, &cfg).unwrap();
    let (native_acc, _) = evaluate(&native, &b_test).unwrap();

    // Transfer: mixture state found on domain A, k-means skipped.
    let gms_a: BTreeMap<String, LayerGm> =
        fx.blobs[0].dgms_state.quant.as_ref().unwrap().gms.clone();
    let components: Vec<usize> = gms_a.values().map(|g| g.len()).collect();
    let mut zero_shot = b_fp32.clone();
    zero_shot.apply_gm(policy.clone(), gms_a.clone()).unwrap();
    let (zs_acc, _) = evaluate(&zero_shot, &b_test).unwrap();
    let kept: Vec<usize> =
        zero_shot.quant.as_ref().unwrap().gms.values().map(|g| g.len()).collect();

    // One epoch of fine-tuning.
    let mut one_epoch = zero_shot.clone();
    let steps1 = b_train.len().div_ceil(32);
    let cfg1 = TrainConfig::new(1, 32, OneCycleSchedule::new(0.01, steps1, 0.3).unwrap());
    train(&mut one_epoch, &b_train, &b_test, &cfg1).unwrap();
    let (oe_acc, _) = evaluate(&one_epoch, &b_test).unwrap();

    let ok = components == kept && oe_acc >= native_acc - 0.02;
    verdict(
        "12 transfer smoke",
        ok,
        &format!(
            "zero-shot {zs_acc:.4} runs end-to-end (components preserved {components:?}); one-epoch {oe_acc:.4} vs native {native_acc:.4}"
        ),
    );
}

#[test]
fn criterion_13_determinism() {
    let fx = fixture();
    let blobs_ok = fx.blobs[0].fp32_ckpt == fx.blobs[1].fp32_ckpt
        && fx.blobs[0].dgms_ckpt == fx.blobs[1].dgms_ckpt;
    let cifar_ok = fx.cifar[0].fp32_ckpt == fx.cifar[1].fp32_ckpt
        && fx.cifar[0].dgms_ckpt == fx.cifar[1].dgms_ckpt;
    verdict(
        "13 determinism",
        blobs_ok && cifar_ok,
        &format!(
            "repeated runs bit-identical: blobs fp32+4bit ({} bytes), cifar fp32+4bit ({} bytes)",
            fx.blobs[0].dgms_ckpt.len(),
            fx.cifar[0].dgms_ckpt.len()
        ),
    );
}
