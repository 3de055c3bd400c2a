//! Independent recomputations: central finite differences for gradients,
//! brute-force cosines and rankings for row and neuron locating.

use std::collections::BTreeSet;

use codebias_core::autodiff::{Tape, Var};
use codebias_core::editor::{edit_gradients, edit_objective, BiasObjective, EditConfig, LossWeights};
use codebias_core::locator::{locate_layer, locate_module, locate_neuron, locate_row, LocateError, RowConfig};
use codebias_core::model::{Coverage, MiniTransformer, ModuleKind, ParameterAddress};
use codebias_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cases, recovery_texts, small_model};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar from `inputs` on a fresh tape.
pub type Build = dyn Fn(&Tape, &[Var]) -> Var;

pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&tape, &vars);
    tape.scalar(loss)
}

/// Worst entry-wise error between analytic gradients and central
/// differences, measured as |a - n| / max(1, |a|, |n|) so tiny gradients are
/// judged on absolute error. Also returns the worst entry's description.
pub fn max_rel_error(inputs: &[Tensor], build: &Build) -> (f64, String) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
        .collect();
    drop(grads);

    let mut worst = (0.0f64, String::new());
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * FD_STEP);
            let a = analytic[ti][i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("input {ti} entry {i}: analytic {a} numeric {numeric}"));
            }
        }
    }
    worst
}

/// Projects a tensor to a scalar with fixed random weights so every entry's
/// gradient is exercised.
pub fn project(tape: &Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape, 1.0));
    let m = tape.mul(x, w).unwrap();
    tape.sum(m)
}

fn case(name: &str, inputs: Vec<Tensor>, build: impl Fn(&Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// One case per differentiable op, plus a small composed network.
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = |rng: &mut ChaCha8Rng, shape: &[usize], scale: f64| random(rng, shape, scale);
    let mut out = vec![
        case("matmul", vec![r(&mut rng, &[3, 4], 1.0), r(&mut rng, &[4, 2], 1.0)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 11)
        }),
        case(
            "linear",
            vec![r(&mut rng, &[3, 4], 1.0), r(&mut rng, &[5, 4], 1.0), r(&mut rng, &[5], 1.0)],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                project(t, y, 12)
            },
        ),
    ];
    let pair = vec![r(&mut rng, &[2, 3], 1.0), r(&mut rng, &[2, 3], 1.0)];
    out.push(case("add", pair.clone(), |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 13)
    }));
    out.push(case("sub", pair.clone(), |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 14)
    }));
    out.push(case("mul", pair.clone(), |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 15)
    }));
    out.push(case("scale", pair.clone(), |t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y, 16)
    }));
    out.push(case("abs", pair, |t, v| {
        let y = t.abs(v[0]);
        project(t, y, 17)
    }));
    out.push(case("sum", vec![r(&mut rng, &[3, 2], 1.0)], |t, v| {
        let s = t.sum(v[0]);
        t.mul(s, s).unwrap()
    }));
    out.push(case("gelu", vec![r(&mut rng, &[4, 5], 3.0)], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 18)
    }));
    out.push(case(
        "layer_norm",
        vec![r(&mut rng, &[3, 6], 2.0), r(&mut rng, &[6], 1.0), r(&mut rng, &[6], 1.0)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, y, 19)
        },
    ));
    for axis in 0..3 {
        out.push(case(&format!("softmax(axis {axis})"), vec![r(&mut rng, &[2, 3, 4], 2.0)], move |t, v| {
            let y = t.softmax(v[0], axis).unwrap();
            project(t, y, 20 + axis as u64)
        }));
    }
    out.push(case("embedding", vec![r(&mut rng, &[5, 3], 1.0)], |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        project(t, y, 23)
    }));
    out.push(case("nll_sum", vec![r(&mut rng, &[4, 6], 3.0)], |t, v| {
        t.nll_sum(v[0], &[Some(1), None, Some(5), Some(0)]).unwrap()
    }));
    out.push(case(
        "causal_attention",
        vec![r(&mut rng, &[5, 4], 1.5), r(&mut rng, &[5, 4], 1.5), r(&mut rng, &[5, 4], 1.5)],
        |t, v| {
            let y = t.causal_attention(v[0], v[1], v[2], 2).unwrap();
            project(t, y, 24)
        },
    ));
    out.push(case("reshape", vec![r(&mut rng, &[2, 6], 1.0)], |t, v| {
        let y = t.reshape(v[0], vec![3, 4]).unwrap();
        project(t, y, 25)
    }));
    out.push(case("transpose", vec![r(&mut rng, &[2, 5], 1.0)], |t, v| {
        let y = t.transpose(v[0]).unwrap();
        project(t, y, 26)
    }));
    out.push(case("rows", vec![r(&mut rng, &[4, 3], 1.0)], |t, v| {
        let y = t.rows(v[0], 1, 2).unwrap();
        project(t, y, 27)
    }));
    out.push(case("select", vec![r(&mut rng, &[4, 3], 1.0)], |t, v| {
        let y = t.select(v[0], 7).unwrap();
        t.mul(y, y).unwrap()
    }));
    out.push(case(
        "two_layer_net",
        vec![
            r(&mut rng, &[4, 3], 1.0),
            r(&mut rng, &[6, 3], 1.0),
            r(&mut rng, &[6], 0.5),
            r(&mut rng, &[5, 6], 1.0),
            r(&mut rng, &[5], 0.5),
        ],
        |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2])).unwrap();
            let h = t.gelu(h);
            let y = t.linear(h, v[3], Some(v[4])).unwrap();
            t.nll_sum(y, &[Some(0), Some(3), Some(4), Some(1)]).unwrap()
        },
    ));
    out
}

/// Worst relative error of the edit objective's gradient on a d_model=8
/// model, over a sample of entries from every parameter tensor. Relative
/// error here is |a - n| / max(|a|, |n|, 1e-6).
pub fn total_loss_rel_error(objective: BiasObjective) -> f64 {
    let cs = cases(3);
    let rec = recovery_texts();
    let model = small_model(&cs, 2, 21);
    let cfg = EditConfig {
        objective,
        weights: LossWeights {
            he: 1.0,
            she: 0.7,
            recover: 0.5,
        },
        ..Default::default()
    };
    let all = vec![Coverage::All; model.params().len()];
    let (record, grads) = edit_gradients(&model, &all, &cs, &rec, &cfg).unwrap();
    let direct = edit_objective(&model, &cs, &rec, &cfg).unwrap();
    assert!((record.l_total - direct.l_total).abs() < 1e-12);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ti, t) in model.params().iter().enumerate() {
        let g = grads[ti].as_ref().expect("every tensor gets a gradient");
        for i in (0..t.len()).step_by((t.len() / 4).max(1)) {
            let mut m = model.clone();
            m.params_mut()[ti].data_mut()[i] += h;
            let up = edit_objective(&m, &cs, &rec, &cfg).unwrap().l_total;
            m.params_mut()[ti].data_mut()[i] -= 2.0 * h;
            let down = edit_objective(&m, &cs, &rec, &cfg).unwrap().l_total;
            let numeric = (up - down) / (2.0 * h);
            let a = g[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn nll(model: &MiniTransformer, prompt: &str, target: u32) -> f64 {
    let ids = model.encode(prompt).unwrap();
    -model.next_token_dist(&ids, None).unwrap()[target as usize].ln()
}

/// Central-difference gradient of the target NLL with respect to a weight.
pub fn fd_grad(model: &MiniTransformer, prompt: &str, target: u32, w: usize) -> Vec<f64> {
    let h = 1e-6;
    let mut m = model.clone();
    let n = m.params()[w].len();
    (0..n)
        .map(|i| {
            let x = m.params()[w].data()[i];
            m.params_mut()[w].data_mut()[i] = x + h;
            let up = nll(&m, prompt, target);
            m.params_mut()[w].data_mut()[i] = x - h;
            let down = nll(&m, prompt, target);
            m.params_mut()[w].data_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn ranked(keys: &[f64], k: usize) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..keys.len()).collect();
    ix.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));
    ix.truncate(k);
    ix
}

/// Cosines compared at 1e-9 resolution, then the gradient-difference norm.
fn ranked_rows(cos: &[f64], spread: &[f64], k: usize) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..cos.len()).collect();
    let q = |x: f64| (x * 1e9).round() as i64;
    ix.sort_by(|&a, &b| {
        q(cos[b])
            .cmp(&q(cos[a]))
            .then(spread[b].partial_cmp(&spread[a]).unwrap())
            .then(a.cmp(&b))
    });
    ix.truncate(k);
    ix
}

/// Row and neuron selections in fc_out of `layer` against a brute-force
/// recomputation from finite-difference gradients. Panics on mismatch.
pub fn check_rows_and_neurons(layer: usize) {
    let cs = cases(4);
    let model = small_model(&cs, 2, 3);
    let module = ParameterAddress::module(layer, ModuleKind::FcOut);
    let w = model.weight_index(layer, ModuleKind::FcOut);
    let (rows, cols) = (8, 12);
    let (he, she) = (model.tokenizer().he(), model.tokenizer().she());
    let cfg = RowConfig {
        top_k: 3,
        ..Default::default()
    };

    let mut want_rows = BTreeSet::new();
    let mut want_neurons = BTreeSet::new();
    let mut fd = Vec::new();
    let report = locate_row(&model, &cs, module, &cfg, "oracle").unwrap();
    for c in &cs {
        let gh = fd_grad(&model, &c.prompt, he, w);
        let gs = fd_grad(&model, &c.prompt, she, w);
        let row = |g: &[f64], i: usize| g[i * cols..(i + 1) * cols].to_vec();
        let cos: Vec<f64> = (0..rows).map(|i| brute_cosine(&row(&gh, i), &row(&gs, i))).collect();
        let spread: Vec<f64> = (0..rows)
            .map(|i| row(&gh, i).iter().zip(row(&gs, i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        want_rows.extend(ranked_rows(&cos, &spread, cfg.top_k));
        fd.push((gh, gs, cos));
    }
    let got_rows: BTreeSet<usize> = report.selected.iter().map(|a| a.row.unwrap()).collect();
    assert_eq!(got_rows, want_rows, "layer {layer}");
    assert_eq!(report.votes.values().sum::<usize>(), cs.len());
    // mean cosine agrees with the finite-difference cosines
    for i in 0..rows {
        let mean = fd.iter().map(|f| f.2[i]).sum::<f64>() / cs.len() as f64;
        let got = report.scores[&ParameterAddress::row(layer, ModuleKind::FcOut, i)];
        assert!((got - mean).abs() < 1e-6, "row {i}: {got} vs {mean}");
    }

    for (gh, gs, _) in &fd {
        for &i in &want_rows {
            let diff: Vec<f64> = (0..cols).map(|j| (gh[i * cols + j] - gs[i * cols + j]).abs()).collect();
            for j in ranked(&diff, 4) {
                want_neurons.insert((i, j));
            }
        }
    }
    let nr = locate_neuron(&model, &cs, &report, None, 4, "oracle").unwrap();
    let got: BTreeSet<(usize, usize)> = nr
        .selected
        .iter()
        .map(|a| (a.row.unwrap(), a.column.unwrap()))
        .collect();
    assert_eq!(got, want_neurons, "layer {layer}");

    // a row outside the selection is refused
    let outside = (0..rows)
        .find(|i| !want_rows.contains(i))
        .map(|i| ParameterAddress::row(layer, ModuleKind::FcOut, i))
        .unwrap();
    let err = locate_neuron(&model, &cs, &report, Some(&[outside]), 4, "oracle").unwrap_err();
    assert!(matches!(err, LocateError::Contract(_)));
}

/// Zeroed layers and modules must score exactly 0. Panics otherwise.
pub fn check_zero_scores() {
    let cs = cases(5);
    let mut model = small_model(&cs, 3, 7);
    for m in ModuleKind::ALL {
        let (w, b) = (model.weight_index(1, m), model.bias_index(1, m));
        model.params_mut()[w].data_mut().fill(0.0);
        model.params_mut()[b].data_mut().fill(0.0);
    }
    let report = locate_layer(&model, &cs, "zero").unwrap();
    assert_eq!(report.scores[&ParameterAddress::layer(1)], 0.0);
    assert!(!report.winners.contains(&ParameterAddress::layer(1)));

    let mr = locate_module(&model, &cs, 1, 2, "zero").unwrap();
    for m in ModuleKind::ALL {
        assert_eq!(mr.scores[&ParameterAddress::module(1, m)], 0.0);
    }
    // a single zeroed module in a live layer
    let w = model.weight_index(2, ModuleKind::VProj);
    let b = model.bias_index(2, ModuleKind::VProj);
    model.params_mut()[w].data_mut().fill(0.0);
    model.params_mut()[b].data_mut().fill(0.0);
    let mr = locate_module(&model, &cs, 2, 2, "zero").unwrap();
    assert_eq!(mr.scores[&ParameterAddress::module(2, ModuleKind::VProj)], 0.0);
    assert!(mr.scores[&ParameterAddress::module(2, ModuleKind::FcOut)] > 0.0);
    let coupling = mr.coupling.unwrap();
    assert_eq!(coupling.len(), 6);

    // ablated distributions stay normalized
    let ids = model.encode(&cs[0].prompt).unwrap();
    for m in ModuleKind::ALL {
        let p = model.next_token_dist(&ids, Some(ParameterAddress::module(2, m))).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
