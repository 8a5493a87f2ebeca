//! Independent reference implementations and the property checks built on them.
//!
//! Each `check_*` returns a one-line summary on success and a description of
//! the first violation on failure.

#![allow(dead_code)]

use prunekit::attention::{attention_of_map, AttentionFunction};
use prunekit::controller::{Action, Controller, ControllerConfig, Observed, Policy, Termination};
use prunekit::experiment::stability_to_pruning;
use prunekit::model::{export_compact, layer_flops, layer_params, total_accounting, LayerParams};
use prunekit::ops::{conv2d_backward, conv2d_forward, ConvWeights};
use prunekit::rng::RngState;
use prunekit::{Architecture, Dims, FilterMask, LayerSpec, ModelState, Shape, Tensor4D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

// ---------------------------------------------------------------- convolution

/// Direct nested-loop cross-correlation over an explicitly zero-padded input.
pub fn naive_conv(x: &Tensor4D, w: &ConvWeights, stride: usize, pad: usize) -> Vec<f64> {
    let d = x.dims();
    let (hp, wp) = (d.h + 2 * pad, d.w + 2 * pad);
    let mut padded = vec![0f64; d.n * d.c * hp * wp];
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..d.h {
                for j in 0..d.w {
                    padded[((n * d.c + c) * hp + i + pad) * wp + j + pad] = x.at(n, c, i, j) as f64;
                }
            }
        }
    }
    let ho = (hp - w.k) / stride + 1;
    let wo = (wp - w.k) / stride + 1;
    let mut out = vec![0f64; d.n * w.n_out * ho * wo];
    for n in 0..d.n {
        for o in 0..w.n_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = w.bias_at(o) as f64;
                    for c in 0..w.n_in {
                        for a in 0..w.k {
                            for b in 0..w.k {
                                let xv = padded[((n * d.c + c) * hp + i * stride + a) * wp + j * stride + b];
                                let wv = w.filters[((o * w.n_in + c) * w.k + a) * w.k + b] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * w.n_out + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

pub struct ConvCase {
    pub x: Tensor4D,
    pub w: ConvWeights,
    pub stride: usize,
    pub pad: usize,
}

pub fn random_conv_case(r: &mut impl Rng) -> ConvCase {
    loop {
        let n = r.random_range(1..=3);
        let c = r.random_range(1..=4);
        let o = r.random_range(1..=5);
        let k = [1, 2, 3, 5][r.random_range(0..4)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2 + 1);
        let h = r.random_range(1..=9);
        let wd = r.random_range(1..=9);
        if h + 2 * pad < k || wd + 2 * pad < k || (h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0 {
            continue;
        }
        let x = Tensor4D::from_vec(Dims::new(n, c, h, wd), uniform(r, n * c * h * wd)).unwrap();
        let bias = r.random_bool(0.5).then(|| uniform(r, o));
        let w = ConvWeights::new(o, c, k, uniform(r, o * c * k * k), bias).unwrap();
        return ConvCase { x, w, stride, pad };
    }
}

pub fn check_conv_oracle(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0f64;
    for i in 0..cases {
        let case = random_conv_case(&mut r);
        let got = conv2d_forward(&case.x, &case.w, case.stride, case.pad).map_err(|e| format!("case {i}: {e}"))?;
        let want = naive_conv(&case.x, &case.w, case.stride, case.pad);
        if got.data().len() != want.len() {
            return Err(format!("case {i}: output length {} vs {}", got.data().len(), want.len()));
        }
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs());
        }
    }
    if worst < 1e-5 {
        Ok(format!("{cases} shapes, max abs err {worst:.2e}"))
    } else {
        Err(format!("max abs err {worst:.2e} >= 1e-5"))
    }
}

fn weighted_output(x: &Tensor4D, w: &ConvWeights, g: &[f64], stride: usize, pad: usize) -> f64 {
    let y = conv2d_forward(x, w, stride, pad).unwrap();
    y.data().iter().zip(g).map(|(&a, &b)| a as f64 * b).sum()
}

/// Relative error with a floor so entries near zero compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `Σ g ⊙ conv(x, w)` against the analytic gradients.
pub fn check_conv_fd(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let eps = 0.25f32;
    let mut worst = 0f64;
    let mut probes = 0usize;
    for i in 0..cases {
        let case = random_conv_case(&mut r);
        let y = conv2d_forward(&case.x, &case.w, case.stride, case.pad).unwrap();
        let g: Vec<f64> = uniform(&mut r, y.data().len()).into_iter().map(f64::from).collect();
        let g_t = Tensor4D::from_vec(y.dims(), g.iter().map(|&v| v as f32).collect()).unwrap();
        let (gx, gw) = conv2d_backward(&case.x, &case.w, &g_t, case.stride, case.pad).map_err(|e| format!("case {i}: {e}"))?;

        for idx in 0..case.w.filters.len() {
            let mut wp = case.w.clone();
            wp.filters[idx] += eps;
            let mut wm = case.w.clone();
            wm.filters[idx] -= eps;
            let step = wp.filters[idx] as f64 - wm.filters[idx] as f64;
            let fd = (weighted_output(&case.x, &wp, &g, case.stride, case.pad)
                - weighted_output(&case.x, &wm, &g, case.stride, case.pad))
                / step;
            worst = worst.max(rel_err(fd, gw.filters[idx] as f64));
            probes += 1;
        }
        let xs = case.x.data().len();
        for _ in 0..xs.min(24) {
            let idx = r.random_range(0..xs);
            let mut xp = case.x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = case.x.clone();
            xm.data_mut()[idx] -= eps;
            let step = xp.data()[idx] as f64 - xm.data()[idx] as f64;
            let fd = (weighted_output(&xp, &case.w, &g, case.stride, case.pad)
                - weighted_output(&xm, &case.w, &g, case.stride, case.pad))
                / step;
            worst = worst.max(rel_err(fd, gx.data()[idx] as f64));
            probes += 1;
        }
    }
    if worst < 1e-3 {
        Ok(format!("{cases} cases, {probes} probes, max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.2e} >= 1e-3"))
    }
}

// ---------------------------------------------------------------- models

/// Random sequential conv net with assorted kernels, strides, padding and pooling.
pub fn random_arch(r: &mut impl Rng) -> Architecture {
    loop {
        let input = Shape::new(r.random_range(1..=3), r.random_range(4..=12), r.random_range(4..=12));
        let (mut c, mut h, mut w) = (input.c, input.h, input.w);
        let mut layers = Vec::new();
        let mut ok = true;
        for _ in 0..r.random_range(1..=4) {
            let k = [1, 3, 5][r.random_range(0..3)];
            let stride = if r.random_bool(0.25) { 2 } else { 1 };
            let pad = r.random_range(0..=k / 2);
            if h + 2 * pad < k || w + 2 * pad < k || (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
                ok = false;
                break;
            }
            let out = r.random_range(1..=12);
            layers.push(LayerSpec::conv(c, out, k, stride, pad));
            layers.push(LayerSpec::Relu);
            c = out;
            h = (h + 2 * pad - k) / stride + 1;
            w = (w + 2 * pad - k) / stride + 1;
            if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 && r.random_bool(0.3) {
                layers.push(if r.random_bool(0.5) {
                    LayerSpec::MaxPool { window: 2, stride: 2 }
                } else {
                    LayerSpec::AvgPool { window: 2, stride: 2 }
                });
                h /= 2;
                w /= 2;
            }
        }
        if !ok || layers.is_empty() {
            continue;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            in_features: c * h * w,
            out_features: r.random_range(2..=5),
        });
        let arch = Architecture { input, layers };
        if arch.validate().is_ok() {
            return arch;
        }
    }
}

/// Random mask with at least one live filter.
pub fn random_mask(r: &mut impl Rng, n: usize) -> FilterMask {
    let p = r.random_range(0.0..0.8);
    let mut bits: Vec<bool> = (0..n).map(|_| !r.random_bool(p)).collect();
    if !bits.iter().any(|&b| b) {
        bits[r.random_range(0..n)] = true;
    }
    FilterMask::from_bits(bits)
}

/// Initialized model with random conv biases and random masks.
pub fn random_model(r: &mut impl Rng) -> ModelState {
    let arch = random_arch(r);
    let mut m = ModelState::init(arch, &RngState::new(r.random())).unwrap();
    for p in &mut m.params {
        match p {
            LayerParams::Conv(c) => {
                let n = c.n_out;
                c.bias = Some(uniform(r, n));
            }
            LayerParams::Linear(l) => {
                let n = l.bias.len();
                l.bias = uniform(r, n);
            }
            LayerParams::None => {}
        }
    }
    let masks = m
        .conv_indices()
        .iter()
        .map(|&i| random_mask(r, m.conv(i).unwrap().n_out))
        .collect();
    m.set_masks(masks).unwrap();
    m
}

/// Parameter and multiply-accumulate counts of a (compacted) model, by walking
/// its stored tensors and running every loop iteration of a naive forward pass
/// over zero-padded inputs. Conv biases are excluded.
pub fn brute_counts(m: &ModelState) -> (u64, u64) {
    let mut params = 0u64;
    let mut macs = 0u64;
    let (mut h, mut w) = (m.arch.input.h, m.arch.input.w);
    for (spec, p) in m.arch.layers.iter().zip(&m.params) {
        match (spec, p) {
            (LayerSpec::Conv { k, stride, pad, .. }, LayerParams::Conv(c)) => {
                params += c.filters.len() as u64;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut ho = 0;
                let mut i = 0;
                while i + k <= hp {
                    ho += 1;
                    i += stride;
                }
                let mut wo = 0;
                let mut j = 0;
                while j + k <= wp {
                    wo += 1;
                    j += stride;
                }
                for _ in 0..ho * wo {
                    for _ in 0..c.n_out {
                        for _ in 0..c.n_in * k * k {
                            macs += 1;
                        }
                    }
                }
                h = ho;
                w = wo;
            }
            (LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride }, _) => {
                h = (h - window) / stride + 1;
                w = (w - window) / stride + 1;
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear(l)) => {
                params += (l.weight.len() + l.bias.len()) as u64;
                for _ in 0..l.out_features {
                    for _ in 0..l.in_features {
                        macs += 1;
                    }
                }
            }
            _ => {}
        }
    }
    (params, macs)
}

pub fn check_accounting(models: usize, seed: u64) -> Check {
    let spec = LayerSpec::conv(3, 16, 3, 1, 1);
    let full = FilterMask::full(16);
    if layer_params(&spec, &full, None) != 432 || layer_flops(&spec, &full, None, 32, 32) != 884_736 {
        return Err("canonical 3->16 3x3 layer on 32x32 is not 432 params / 884736 FLOPs".into());
    }
    let mut half = FilterMask::full(16);
    for j in 0..4 {
        half.prune(j);
    }
    if layer_params(&LayerSpec::conv(16, 32, 3, 1, 1), &FilterMask::full(32), Some(&half)) != 3456 {
        return Err("16->32 layer after 4 pruned inputs is not 3456 params".into());
    }
    let mut r = rng(seed);
    for i in 0..models {
        let m = random_model(&mut r);
        let acct = total_accounting(&m);
        let compact = export_compact(&m).map_err(|e| format!("model {i}: {e}"))?;
        let (params, macs) = brute_counts(&compact);
        if acct.total_params != params || acct.total_flops != 2 * macs {
            return Err(format!(
                "model {i}: accounting {}/{} vs brute force {}/{}",
                acct.total_params,
                acct.total_flops,
                params,
                2 * macs
            ));
        }
    }
    Ok(format!("{models} random models exact; canonical 432 / 884736 / 3456"))
}

pub fn check_compaction(models: usize, inputs: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0f32;
    for i in 0..models {
        let m = random_model(&mut r);
        let compact = export_compact(&m).map_err(|e| format!("model {i}: {e}"))?;
        let s = m.arch.input;
        let x = Tensor4D::from_vec(Dims::new(inputs, s.c, s.h, s.w), uniform(&mut r, inputs * s.len())).unwrap();
        let a = m.logits(&x).unwrap();
        let b = compact.logits(&x).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    if worst < 1e-5 {
        Ok(format!("{models} models x {inputs} inputs, max abs diff {worst:.2e}"))
    } else {
        Err(format!("max abs diff {worst:.2e} >= 1e-5"))
    }
}

// ---------------------------------------------------------------- attention

/// True when `a` and `b` never order two filters in opposite directions.
pub fn same_ranking(a: &[f64], b: &[f64]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| !(a[i] < a[j] && b[i] > b[j])))
}

pub fn check_attention(maps: usize, seed: u64) -> Check {
    let a = [1.0f32, 2.0, 3.0, 0.0];
    let hand = [
        (AttentionFunction::Mean, 1.0, 1.5),
        (AttentionFunction::Max, 2.0, 9.0),
        (AttentionFunction::Sum, 1.0, 6.0),
    ];
    for (f, p, want) in hand {
        let got = attention_of_map(&a, f, p);
        if got != want {
            return Err(format!("{} p={p}: {got} != {want}", f.name()));
        }
    }
    for f in [AttentionFunction::Mean, AttentionFunction::Max, AttentionFunction::Sum] {
        if attention_of_map(&[0.0; 6], f, 3.0) != 0.0 {
            return Err("all-zero map does not score 0".into());
        }
    }
    let mut r = rng(seed);
    let per_layer = 8;
    for layer in 0..maps / per_layer {
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let layer_maps: Vec<Vec<f32>> = (0..per_layer)
            .map(|_| (0..h * w).map(|_| r.random_range(-1.0f32..1.0).max(0.0) * 3.0).collect())
            .collect();
        let score = |f, p| -> Vec<f64> { layer_maps.iter().map(|m| attention_of_map(m, f, p)).collect() };
        let mean = score(AttentionFunction::Mean, 1.0);
        let sum = score(AttentionFunction::Sum, 1.0);
        if !same_ranking(&mean, &sum) {
            return Err(format!("layer {layer}: mean and sum rankings differ"));
        }
        let max1 = score(AttentionFunction::Max, 1.0);
        for p in [1.5, 2.0, 3.0, 4.0] {
            if !same_ranking(&max1, &score(AttentionFunction::Max, p)) {
                return Err(format!("layer {layer}: max ranking changes at p={p}"));
            }
        }
    }
    Ok(format!("hand values exact; {maps} random maps rank-consistent"))
}

// ---------------------------------------------------------------- controller

pub fn observed(acc_loss: f64, params: u64) -> Observed {
    Observed {
        acc_loss: Some(acc_loss),
        param_reduction: None,
        flops_reduction: None,
        current_params: Some(params),
        current_flops: None,
    }
}

pub fn check_hand_trace() -> Check {
    let mut c = Controller::new(Policy::accuracy(1.0), ControllerConfig::default(), 10_000).unwrap();
    let mut ts = vec![c.threshold()];
    for (loss, size) in [(0.1, 9000), (0.3, 8000), (0.6, 7000)] {
        let d = c.observe(&observed(loss, size), None).unwrap();
        if d.action != Action::Continue {
            return Err(format!("expected continue, got {}", d.action.label()));
        }
        ts.push(c.threshold());
    }
    let d = c.observe(&observed(1.2, 6000), None).unwrap();
    if d.action != (Action::Rollback { to_round: 3 }) {
        return Err(format!("expected rollback:3, got {}", d.action.label()));
    }
    let rolled_to = c.state.entry(3).unwrap().t;
    let expected = [0.0, 0.005, 0.010, 0.015];
    let exact = ts.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15)
        && (rolled_to - 0.010).abs() < 1e-15
        && (c.state.lambda - 0.0025).abs() < 1e-15
        && (c.threshold() - 0.0125).abs() < 1e-15;
    if exact {
        Ok("0 -> 0.005 -> 0.010 -> 0.015 -> rollback to 0.010, lambda 0.0025 -> 0.0125".into())
    } else {
        Err(format!(
            "trace {ts:?}, rollback T {rolled_to}, lambda {}, next T {}",
            c.state.lambda,
            c.threshold()
        ))
    }
}

pub struct OracleRun {
    pub status: Termination,
    pub final_t: f64,
    pub crossing: f64,
    pub min_lambda: f64,
    pub rounds: usize,
}

/// Drives the accuracy-guaranteed controller against `loss(T) = target·(T/crossing)^gamma`
/// with model size shrinking linearly in `T`.
pub fn run_oracle(crossing: f64, gamma: f64, target: f64, cfg: ControllerConfig) -> OracleRun {
    let baseline = 1_000_000u64;
    let mut c = Controller::new(Policy::accuracy(target), cfg, baseline).unwrap();
    let status = loop {
        let t = c.threshold();
        let loss = target * (t / crossing).powf(gamma);
        let size = (baseline as f64 * (1.0 - t)).round() as u64;
        if let Action::Terminate { status } = c.observe(&observed(loss, size), None).unwrap().action {
            break status;
        }
    };
    let final_round = c.state.final_round(status);
    OracleRun {
        status,
        final_t: c.state.entry(final_round).unwrap().t,
        crossing,
        min_lambda: c.state.min_lambda(),
        rounds: c.state.ledger.len() - 1,
    }
}

pub fn check_monotone_oracles(count: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut max_rounds = 0;
    let mut misses = Vec::new();
    for i in 0..count {
        let crossing = r.random_range(0.002..0.2);
        let gamma = r.random_range(0.5..3.0);
        let target = r.random_range(0.5..2.0);
        let run = run_oracle(crossing, gamma, target, ControllerConfig::default());
        max_rounds = max_rounds.max(run.rounds);
        let gap = run.crossing - run.final_t;
        if run.status != Termination::Converged || !(gap > 0.0 && gap <= run.min_lambda + 1e-15) {
            misses.push(format!(
                "oracle {i} (crossing {crossing:.6}): {:?} at T {:.6}, gap {gap:.3e} > lambda_min {:.3e}",
                run.status, run.final_t, run.min_lambda
            ));
        }
    }
    if misses.is_empty() {
        Ok(format!(
            "{count} oracles converged within lambda_min of the crossing (max {max_rounds} rounds)"
        ))
    } else {
        Err(format!(
            "{}/{count} oracles outside lambda_min: {}",
            misses.len(),
            misses.join("; ")
        ))
    }
}

/// Relative size changes just under and just over the tolerance.
pub fn check_convergence_boundary() -> Check {
    let run = |step: f64| -> (Action, usize) {
        let mut c = Controller::new(Policy::accuracy(1.0), ControllerConfig::default(), 1_000_000).unwrap();
        let mut size = 1_000_000f64;
        let mut last = Action::Continue;
        for round in 1..=3 {
            size *= 1.0 - step;
            last = c.observe(&observed(0.1, size.round() as u64), None).unwrap().action;
            if matches!(last, Action::Terminate { .. }) {
                return (last, round);
            }
        }
        (last, 3)
    };
    let (under, at) = run(0.0009);
    let (over, _) = run(0.0011);
    if under
        != (Action::Terminate {
            status: Termination::Converged,
        })
        || at != 3
    {
        return Err(format!("0.09% steps: {} after {at} rounds", under.label()));
    }
    if over != Action::Continue {
        return Err(format!("0.11% steps: {}", over.label()));
    }
    Ok("0.09% x3 converges at round 3; 0.11% x3 continues".into())
}

// ---------------------------------------------------------------- stability

/// Stability of a hand-built pair. The live weights differ by 3 in one place;
/// the pruned filters differ by 12 and 4, which only the unmasked distance sees.
pub fn check_stability_hand() -> Check {
    let arch = Architecture {
        input: Shape::new(1, 3, 3),
        layers: vec![
            LayerSpec::conv(1, 3, 1, 1, 0),
            LayerSpec::Relu,
            LayerSpec::conv(3, 2, 1, 1, 0),
        ],
    };
    let mut original = ModelState::zeros(arch).unwrap();
    let mut pruned = original.clone();
    original.conv_mut(0).unwrap().filters = vec![1.0, 2.0, 3.0];
    original.conv_mut(2).unwrap().filters = vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0];
    pruned.conv_mut(0).unwrap().filters = vec![4.0, 2.0, 15.0];
    pruned.conv_mut(2).unwrap().filters = vec![0.5, 0.5, 0.5, 1.0, 1.0, 5.0];
    pruned.masks = vec![
        FilterMask::from_bits(vec![true, true, false]),
        FilterMask::from_bits(vec![true, false]),
    ];
    let want = 3.0f64;
    let got = stability_to_pruning(&pruned, &original).map_err(|e| e.to_string())?;
    let mut all_live = pruned.clone();
    all_live.masks = vec![FilterMask::full(3), FilterMask::full(2)];
    let want_full = (9.0f64 + 144.0 + 16.0).sqrt();
    let got_full = stability_to_pruning(&all_live, &original).map_err(|e| e.to_string())?;
    if (got - want).abs() < 1e-6 && (got_full - want_full).abs() < 1e-6 {
        Ok(format!(
            "masked {got:.6} (hand 3), unmasked {got_full:.6} (hand {want_full:.6})"
        ))
    } else {
        Err(format!("masked {got} vs {want}, unmasked {got_full} vs {want_full}"))
    }
}
