//! Central finite-difference checks of every differentiable op, the neural
//! blocks, and both models at reduced size. Everything runs in `f64`.
//!
//! Non-scalar outputs are reduced to a scalar by a fixed random projection,
//! so every output element contributes to the checked gradient.

use crate::codec::{TokenId, VOCAB_SIZE};
use crate::models::{CrossAttentionMode, Model, ModelConfig, ModelKind};
use crate::nn::{self, GruCell, Linear, MultiHeadAttention, ParamStore, Session};
use crate::tensor::{Graph, SeededRng, Tensor, TensorError, Var};
use crate::train;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst entry, e.g. `input 1 [17]`.
    pub worst: String,
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err < TOLERANCE
    }

    fn failed(name: &str, e: impl std::fmt::Display) -> Self {
        CheckResult {
            name: name.into(),
            checked: 0,
            max_rel_err: f64::INFINITY,
            worst: String::new(),
            error: Some(e.to_string()),
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Entries checked per tensor; `None` checks every entry.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            samples: Some(6),
            seed: 7,
        }
    }
}

fn pick_entries(n: usize, samples: Option<usize>, rng: &mut SeededRng) -> Vec<usize> {
    match samples {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    if g.value(out).numel() == 1 {
        return Ok(g.sum(out));
    }
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::uniform(shape, -1.0, 1.0, &mut SeededRng::derive(seed, &[0x70726f6a])));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn eval_op(f: &OpFn, inputs: &[Tensor<f64>], seed: u64) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = project(&mut g, out, seed)?;
    Ok(g.value(l).item())
}

/// Checks `f`'s gradient with respect to every input.
pub fn check_op(name: &str, inputs: Vec<Tensor<f64>>, f: &OpFn, opts: &SuiteOptions) -> CheckResult {
    let run = || -> Result<CheckResult, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        let l = project(&mut g, out, opts.seed)?;
        g.backward(l)?;
        let mut res = CheckResult {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
            error: None,
        };
        let mut rng = SeededRng::derive(opts.seed, &[0x6f7073]);
        for (i, v) in vars.iter().enumerate() {
            let grad = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            for j in pick_entries(inputs[i].numel(), opts.samples, &mut rng) {
                let mut moved = inputs.clone();
                let x0 = moved[i].data()[j];
                moved[i].data_mut()[j] = x0 + STEP;
                let lp = eval_op(f, &moved, opts.seed)?;
                moved[i].data_mut()[j] = x0 - STEP;
                let lm = eval_op(f, &moved, opts.seed)?;
                let numeric = (lp - lm) / (2.0 * STEP);
                let e = rel_err(grad[j], numeric);
                res.checked += 1;
                if e > res.max_rel_err || !e.is_finite() {
                    res.max_rel_err = e;
                    res.worst = format!("input {i} [{j}]: analytic {:.6e}, numeric {:.6e}", grad[j], numeric);
                }
            }
        }
        Ok(res)
    };
    run().unwrap_or_else(|e| CheckResult::failed(name, e))
}

type SessionFn<'a> = dyn Fn(&mut Session<f64>) -> Result<Var, Box<dyn std::error::Error>> + 'a;

fn session_loss(
    store: &ParamStore<f64>,
    f: &SessionFn,
    dropout_seed: Option<u64>,
    seed: u64,
    grad: bool,
) -> Result<(f64, Vec<Option<Vec<f64>>>), Box<dyn std::error::Error>> {
    let mut s = match (dropout_seed, grad) {
        (Some(d), _) => Session::train(store, SeededRng::new(d)),
        (None, true) => Session::with_grad(store),
        (None, false) => Session::eval(store),
    };
    let out = f(&mut s)?;
    let l = project(&mut s.g, out, seed)?;
    let value = s.g.value(l).item();
    if grad {
        s.backward(l)?;
        Ok((value, s.param_grads()))
    } else {
        Ok((value, Vec::new()))
    }
}

/// Checks the gradient of `f` with respect to every tensor in `store`.
/// With `dropout_seed`, runs in training mode with a fixed dropout stream.
pub fn check_params(
    name: &str,
    store: &ParamStore<f64>,
    f: &SessionFn,
    dropout_seed: Option<u64>,
    opts: &SuiteOptions,
) -> CheckResult {
    let run = || -> Result<CheckResult, Box<dyn std::error::Error>> {
        let (_, grads) = session_loss(store, f, dropout_seed, opts.seed, true)?;
        let mut res = CheckResult {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
            error: None,
        };
        let mut rng = SeededRng::derive(opts.seed, &[0x7061_7261]);
        let mut moved = store.clone();
        for (id, pname, t) in store.iter() {
            let grad = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
            for j in pick_entries(t.numel(), opts.samples, &mut rng) {
                let x0 = t.data()[j];
                moved.get_mut(id).data_mut()[j] = x0 + STEP;
                let (lp, _) = session_loss(&moved, f, dropout_seed, opts.seed, false)?;
                moved.get_mut(id).data_mut()[j] = x0 - STEP;
                let (lm, _) = session_loss(&moved, f, dropout_seed, opts.seed, false)?;
                moved.get_mut(id).data_mut()[j] = x0;
                let numeric = (lp - lm) / (2.0 * STEP);
                let e = rel_err(grad[j], numeric);
                res.checked += 1;
                if e > res.max_rel_err || !e.is_finite() {
                    res.max_rel_err = e;
                    res.worst = format!("{pname} [{j}]: analytic {:.6e}, numeric {:.6e}", grad[j], numeric);
                }
            }
        }
        Ok(res)
    };
    run().unwrap_or_else(|e| CheckResult::failed(name, e))
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values kept at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut SeededRng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for x in t.data_mut() {
        *x = x.signum() * (x.abs() + gap);
    }
    t
}

fn positive(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng)
}

/// Every differentiable tensor op.
pub fn op_checks(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut rng = SeededRng::derive(opts.seed, &[0x6f70]);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut c = |name: &str, inputs: Vec<Tensor<f64>>, f: &OpFn| out.push(check_op(name, inputs, f, opts));

    c("add (broadcast)", vec![randn(&[3, 4], r), randn(&[4], r)], &|g, v| g.add(v[0], v[1]));
    c("sub (broadcast)", vec![randn(&[2, 3, 4], r), randn(&[3, 1], r)], &|g, v| g.sub(v[0], v[1]));
    c("mul (broadcast)", vec![randn(&[3, 4], r), randn(&[3, 1], r)], &|g, v| g.mul(v[0], v[1]));
    c("div (broadcast)", vec![randn(&[3, 4], r), positive(&[4], r)], &|g, v| g.div(v[0], v[1]));
    c("scale", vec![randn(&[5], r)], &|g, v| Ok(g.scale(v[0], -2.5)));
    c("neg", vec![randn(&[5], r)], &|g, v| Ok(g.neg(v[0])));
    c("add_scalar", vec![randn(&[5], r)], &|g, v| Ok(g.add_scalar(v[0], 1.5)));
    c("tanh", vec![randn(&[6], r)], &|g, v| Ok(g.tanh(v[0])));
    c("sigmoid", vec![randn(&[6], r)], &|g, v| Ok(g.sigmoid(v[0])));
    c("leaky_relu", vec![away_from_zero(&[8], 0.05, r)], &|g, v| Ok(g.leaky_relu(v[0], 0.01)));
    c("relu", vec![away_from_zero(&[8], 0.05, r)], &|g, v| Ok(g.relu(v[0])));
    c("exp", vec![randn(&[6], r)], &|g, v| Ok(g.exp(v[0])));
    c("log", vec![positive(&[6], r)], &|g, v| Ok(g.log(v[0])));
    c("reshape", vec![randn(&[2, 6], r)], &|g, v| {
        let x = g.reshape(v[0], [3, 4])?;
        g.mul(x, x)
    });
    c("permute", vec![randn(&[2, 3, 4], r)], &|g, v| {
        let x = g.permute(v[0], &[2, 0, 1])?;
        let w = g.constant(Tensor::from_f64([4, 2, 3], &(0..24).map(|i| i as f64 * 0.1).collect::<Vec<_>>())?);
        g.mul(x, w)
    });
    c("transpose", vec![randn(&[2, 3, 4], r)], &|g, v| {
        let x = g.transpose(v[0])?;
        g.mul(x, x)
    });
    c("concat", vec![randn(&[2, 3], r), randn(&[2, 2], r)], &|g, v| {
        let x = g.concat(&[v[0], v[1]], 1)?;
        g.mul(x, x)
    });
    c("slice", vec![randn(&[4, 3], r)], &|g, v| {
        let x = g.slice(v[0], 0, 1, 3)?;
        g.mul(x, x)
    });
    c("matmul", vec![randn(&[3, 4], r), randn(&[4, 2], r)], &|g, v| g.matmul(v[0], v[1]));
    c("matmul (batched)", vec![randn(&[2, 3, 4], r), randn(&[2, 4, 5], r)], &|g, v| g.matmul(v[0], v[1]));
    c("matmul (shared rhs)", vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)], &|g, v| g.matmul(v[0], v[1]));
    c("matmul_bt", vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)], &|g, v| g.matmul_bt(v[0], v[1]));
    c("conv2d (stride 1, pad 1)", vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)], &|g, v| {
        g.conv2d(v[0], v[1], 1, 1)
    });
    c("conv2d (stride 2, pad 1, k4)", vec![randn(&[1, 3, 8, 8], r), randn(&[2, 3, 4, 4], r)], &|g, v| {
        g.conv2d(v[0], v[1], 2, 1)
    });
    c("conv2d (unbatched)", vec![randn(&[2, 4, 4], r), randn(&[2, 2, 2, 2], r)], &|g, v| {
        g.conv2d(v[0], v[1], 1, 0)
    });
    c("softmax", vec![randn(&[3, 5], r)], &|g, v| g.softmax(v[0], 1));
    c("softmax (axis 0)", vec![randn(&[4, 3], r)], &|g, v| g.softmax(v[0], 0));
    c("log_softmax", vec![randn(&[3, 5], r)], &|g, v| g.log_softmax(v[0], 1));
    c("layer_norm (affine)", vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], &|g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1, 1e-5)
    });
    c("layer_norm (channel axis)", vec![randn(&[2, 4, 3, 3], r), randn(&[4], r), randn(&[4], r)], &|g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1, 1e-5)
    });
    c("layer_norm (plain)", vec![randn(&[4, 5], r)], &|g, v| g.layer_norm(v[0], None, None, 1, 1e-5));
    c("global_avg_pool", vec![randn(&[2, 3, 4, 4], r)], &|g, v| {
        let x = g.global_avg_pool(v[0])?;
        g.mul(x, x)
    });
    c("sum", vec![randn(&[3, 4], r)], &|g, v| {
        let x = g.mul(v[0], v[0])?;
        Ok(g.sum(x))
    });
    c("mean", vec![randn(&[3, 4], r)], &|g, v| {
        let x = g.mul(v[0], v[0])?;
        Ok(g.mean(x))
    });
    c("gather_cols", vec![randn(&[4, 6], r)], &|g, v| {
        let x = g.gather_cols(v[0], &[5, 0, 5, 2])?;
        g.mul(x, x)
    });
    c("pick", vec![randn(&[3, 5], r)], &|g, v| {
        let x = g.pick(v[0], &[4, 0, 2])?;
        g.mul(x, x)
    });
    out
}

fn store_with_inputs(inputs: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut st = ParamStore::new();
    for (n, t) in inputs {
        st.add(*n, t.clone()).expect("distinct names");
    }
    st
}

fn input(s: &mut Session<f64>, name: &str) -> Var {
    let id = s.store().id(name).expect("input registered");
    s.p(id)
}

/// The neural building blocks, including their inputs.
pub fn block_checks(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut rng = SeededRng::derive(opts.seed, &[0x626c6b]);
    let r = &mut rng;
    let mut out = Vec::new();

    let mut st = store_with_inputs(&[("x", randn(&[3, 5], r))]);
    let lin = Linear::new(&mut st, "lin", 5, 4, true, r).unwrap();
    out.push(check_params("linear", &st, &|s| {
        let x = input(s, "x");
        Ok(lin.forward(s, x)?)
    }, None, opts));

    let mut st = store_with_inputs(&[("x", randn(&[4, 6], r))]);
    let ln = nn::LayerNorm::new(&mut st, "ln", 6).unwrap();
    for v in st.get_mut(ln.scale).data_mut() {
        *v += r.normal() * 0.3;
    }
    out.push(check_params("layer norm block", &st, &|s| {
        let x = input(s, "x");
        Ok(ln.forward(s, x, 1)?)
    }, None, opts));

    let mut st = store_with_inputs(&[("frames", randn(&[2, 3, 16, 16], r))]);
    let enc = nn::ConvEncoder::new(&mut st, "enc", 16, r).unwrap();
    out.push(check_params("conv frame encoder", &st, &|s| {
        let x = input(s, "frames");
        Ok(enc.forward(s, x)?)
    }, None, opts));

    let mut st = store_with_inputs(&[("xs", randn(&[4, 3], r)), ("h0", randn(&[1, 5], r))]);
    let cell = GruCell::new(&mut st, "gru", 3, 5, r).unwrap();
    for id in [cell.b_ih, cell.b_hh] {
        for v in st.get_mut(id).data_mut() {
            *v = r.normal() * 0.2;
        }
    }
    out.push(check_params(
        "gru",
        &st,
        &|s| {
            let (xs, h0) = (input(s, "xs"), input(s, "h0"));
            Ok(cell.run(s, xs, h0)?.0)
        },
        None,
        opts,
    ));

    let mask = nn::causal_mask::<f64>(4);
    let st = store_with_inputs(&[("q", randn(&[2, 4, 3], r)), ("k", randn(&[2, 4, 3], r)), ("v", randn(&[2, 4, 3], r))]);
    out.push(check_params(
        "masked attention",
        &st,
        &|s| {
            let (q, k, v) = (input(s, "q"), input(s, "k"), input(s, "v"));
            Ok(nn::attention(s, q, k, v, Some(&mask), 0.0)?.0)
        },
        None,
        opts,
    ));

    let mut st = store_with_inputs(&[("xq", randn(&[3, 8], r)), ("xkv", randn(&[5, 8], r))]);
    let mha = MultiHeadAttention::new(&mut st, "mha", 8, 2, r).unwrap();
    out.push(check_params(
        "multi-head attention",
        &st,
        &|s| {
            let (xq, xkv) = (input(s, "xq"), input(s, "xkv"));
            Ok(mha.forward(s, xq, xkv, None, 0.0)?)
        },
        None,
        opts,
    ));
    out.push(check_params(
        "encoder-side mixing attention",
        &st,
        &|s| {
            let (xq, xkv) = (input(s, "xq"), input(s, "xkv"));
            let mix = mha.literal_mix(s, xkv, 0.0)?;
            Ok(mha.literal_apply(s, xq, mix)?)
        },
        None,
        opts,
    ));
    out.push(check_params(
        "attention with dropout",
        &st,
        &|s| {
            let (xq, xkv) = (input(s, "xq"), input(s, "xkv"));
            Ok(mha.forward(s, xq, xkv, None, 0.3)?)
        },
        Some(11),
        opts,
    ));

    let mut st = store_with_inputs(&[("z", randn(&[3, 6], r))]);
    let ffn = nn::Ffn::new(&mut st, "ffn", 6, 12, r).unwrap();
    for id in [ffn.l1.b.unwrap()] {
        for v in st.get_mut(id).data_mut() {
            *v = 0.1 + r.uniform(0.0, 0.2);
        }
    }
    out.push(check_params("ffn", &st, &|s| {
        let x = input(s, "z");
        Ok(ffn.forward(s, x)?)
    }, None, opts));

    let mut st = ParamStore::new();
    let emb = nn::Embedding::new(&mut st, "emb", 6, VOCAB_SIZE, r).unwrap();
    let ids: Vec<TokenId> = [3u32, 300, 3, 17].iter().map(|&i| TokenId::new(i).unwrap()).collect();
    out.push(check_params("embedding", &st, &|s| Ok(emb.forward(s, &ids)?), None, opts));

    let st = store_with_inputs(&[("logits", randn(&[4, VOCAB_SIZE], r))]);
    let targets: Vec<TokenId> = [5u32, 9, 309, 0].iter().map(|&i| TokenId::new(i).unwrap()).collect();
    out.push(check_params(
        "nll loss (masked)",
        &st,
        &|s| {
            let l = input(s, "logits");
            Ok(train::nll_loss(s, l, &targets, &[true, false, true, true])?)
        },
        None,
        opts,
    ));
    out
}

/// Both models at H=64 with small frames fed through the conv encoder.
pub fn model_checks(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut rng = SeededRng::derive(opts.seed, &[0x6d6f64]);
    let frames: Tensor<f64> = Tensor::uniform([40, 3, 8, 8], -1.0, 1.0, &mut rng);
    let target: Vec<TokenId> = [308u32, 39, 207, 127, 250, 40]
        .iter()
        .map(|&i| TokenId::new(i).unwrap())
        .collect();
    let next: Vec<TokenId> = target[1..].iter().copied().chain([TokenId::END]).collect();
    let configs = [
        ("seq2seq (H=64)", ModelConfig::seq2seq_reduced()),
        ("vmt (H=64)", ModelConfig::vmt_reduced()),
        (
            "vmt (H=64, encoder-side keys)",
            ModelConfig {
                cross_attention_mode: CrossAttentionMode::PaperLiteral,
                ..ModelConfig::vmt_reduced()
            },
        ),
    ];
    configs
        .into_iter()
        .map(|(name, cfg)| {
            debug_assert!(cfg.kind == ModelKind::Seq2seq || cfg.hidden == 64);
            let model = match Model::<f64>::new(cfg, opts.seed) {
                Ok(m) => m,
                Err(e) => return CheckResult::failed(name, e),
            };
            let mask = vec![true; next.len()];
            check_params(
                name,
                &model.params,
                &|s| {
                    let x = s.constant(frames.clone());
                    let logits = model.forward_frames(s, x, &target)?;
                    Ok(train::nll_loss(s, logits, &next, &mask)?)
                },
                None,
                opts,
            )
        })
        .collect()
}

/// The complete suite: ops, blocks, models.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut all = op_checks(opts);
    all.extend(block_checks(opts));
    all.extend(model_checks(opts));
    all
}
