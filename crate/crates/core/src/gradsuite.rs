//! Finite-difference checks over every layer, encoder and objective, run
//! across a range of seeds. Each case builds a random instance in `f64`,
//! contracts the output with a random tensor so the loss is a scalar, and
//! compares analytic parameter and input gradients with central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{Adapter, ScaleHead};
use crate::error::Result;
use crate::gradcheck::{check_model, numerical_gradient, GradTolerance};
use crate::layers::{init_normal, Conv1d, Embedding, Linear, Mlp};
use crate::loss::{cls_contrastive, cosent, ctc_loss, info_nce, mse_align, GradedPair};
use crate::model::{AsrModel, EmbeddingModel, ModelConfig};
use crate::ops;
use crate::synth::{SpeechEncoder, TextEncoder};
use crate::tensor::{Parameterized, Tensor2D};

pub const TAU: f64 = 0.07;
const MAX_ENTRIES: usize = 24;

/// Outcome of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    /// Coordinates compared across all seeds.
    pub checked: usize,
    pub failure: Option<String>,
}

type Case = fn(u64, GradTolerance) -> Result<std::result::Result<usize, String>>;

pub const CASES: &[(&str, Case)] = &[
    ("linear", linear),
    ("conv1d", conv1d),
    ("embedding", embedding),
    ("mlp", mlp),
    ("gelu", gelu),
    ("mean_pool", mean_pool),
    ("cosine_sim", cosine),
    ("log_softmax", log_softmax),
    ("speech_encoder", speech_encoder),
    ("text_encoder", text_encoder),
    ("adapter", adapter),
    ("scale_head", scale_head),
    ("embedding_model", embedding_model),
    ("asr_model", asr_model),
    ("mse_align", mse),
    ("info_nce", nce),
    ("cosent", cosent_case),
    ("cls_contrastive", cls_case),
    ("ctc", ctc),
];

pub fn run_suite(seeds: std::ops::Range<u64>, tol: GradTolerance) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(CASES.len());
    for &(name, case) in CASES {
        let mut res = CaseResult { name, seeds: 0, checked: 0, failure: None };
        for seed in seeds.clone() {
            res.seeds += 1;
            match case(seed, tol)? {
                Ok(n) => res.checked += n,
                Err(msg) => {
                    res.failure = Some(format!("seed {seed}: {msg}"));
                    break;
                }
            }
        }
        out.push(res);
    }
    Ok(out)
}

fn rng(seed: u64, case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(seed, 500, case))
}

fn randn(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor2D<f64> {
    init_normal(rows, cols, 1.0, r)
}

fn contract(a: &Tensor2D<f64>, w: &Tensor2D<f64>) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

fn model_check<M: Parameterized<f64>>(
    m: &mut M,
    loss: impl Fn(&M) -> Result<f64>,
    backward: impl Fn(&mut M) -> Result<()>,
    seed: u64,
    tol: GradTolerance,
) -> Result<std::result::Result<usize, String>> {
    Ok(check_model(m, loss, backward, MAX_ENTRIES, seed, tol)?.map_err(|e| e.to_string()))
}

fn input_check(
    what: &str,
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    tol: GradTolerance,
) -> std::result::Result<usize, String> {
    let mut err = None;
    let numeric = numerical_gradient(
        |v| match f(v) {
            Ok(l) => l,
            Err(e) => {
                err.get_or_insert(e.to_string());
                f64::NAN
            }
        },
        x,
        tol.h,
    );
    if let Some(e) = err {
        return Err(format!("{what}: {e}"));
    }
    tol.compare(what, analytic, &numeric).map_err(|e| e.to_string())?;
    Ok(x.len())
}

fn both(
    a: std::result::Result<usize, String>,
    b: std::result::Result<usize, String>,
) -> std::result::Result<usize, String> {
    Ok(a? + b?)
}

fn reshape(rows: usize, cols: usize, v: &[f64]) -> Result<Tensor2D<f64>> {
    Tensor2D::new(rows, cols, v.to_vec())
}

fn linear(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 0);
    let mut m = Linear::<f64>::new("lin", 5, 4, r);
    let x = randn(3, 5, r);
    let w = randn(3, 4, r);
    let d_x = m.clone().backward(&x, &w)?;
    let params = model_check(&mut m, |m| Ok(contract(&m.forward(&x)?, &w)), |m| m.backward(&x, &w).map(|_| ()), seed, tol)?;
    let m2 = m.clone();
    let inputs = input_check("input", |v| Ok(contract(&m2.forward(&reshape(3, 5, v)?)?, &w)), x.data(), d_x.data(), tol);
    Ok(both(params, inputs))
}

fn conv1d(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 1);
    let mut m = Conv1d::<f64>::new("conv", 3, 4, 3, 2, r)?;
    for b in m.bias.value.data_mut() {
        *b = 0.1;
    }
    let x = randn(9, 3, r);
    let w = randn(4, 4, r);
    let d_x = m.clone().backward(&x, &w)?;
    let params = model_check(&mut m, |m| Ok(contract(&m.forward(&x)?, &w)), |m| m.backward(&x, &w).map(|_| ()), seed, tol)?;
    let m2 = m.clone();
    let inputs = input_check("input", |v| Ok(contract(&m2.forward(&reshape(9, 3, v)?)?, &w)), x.data(), d_x.data(), tol);
    Ok(both(params, inputs))
}

fn embedding(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 2);
    let mut m = Embedding::<f64>::new("emb", 7, 4, r);
    let tokens = [1u32, 3, 3, 6, (seed % 7) as u32];
    let w = randn(tokens.len(), 4, r);
    model_check(&mut m, |m| Ok(contract(&m.forward(&tokens)?, &w)), |m| m.backward(&tokens, &w), seed, tol)
}

fn mlp(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 3);
    let mut m = Mlp::<f64>::new("mlp", 4, 6, 3, r);
    let x = randn(5, 4, r);
    let w = randn(5, 3, r);
    let (_, trace) = m.forward_trace(&x)?;
    let d_x = m.clone().backward(&trace, &w)?;
    let params = model_check(
        &mut m,
        |m| Ok(contract(&m.forward(&x)?, &w)),
        |m| {
            let (_, t) = m.forward_trace(&x)?;
            m.backward(&t, &w).map(|_| ())
        },
        seed,
        tol,
    )?;
    let m2 = m.clone();
    let inputs = input_check("input", |v| Ok(contract(&m2.forward(&reshape(5, 4, v)?)?, &w)), x.data(), d_x.data(), tol);
    Ok(both(params, inputs))
}

fn gelu(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 4);
    let x = randn(4, 5, r).scale(2.0);
    let w = randn(4, 5, r);
    let d = ops::gelu_backward(&x, &w)?;
    Ok(input_check("input", |v| Ok(contract(&ops::gelu(&reshape(4, 5, v)?), &w)), x.data(), d.data(), tol))
}

fn mean_pool(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 5);
    let x = randn(6, 3, r);
    let w = randn(1, 3, r);
    let d = ops::mean_pool_backward(6, &w)?;
    Ok(input_check("input", |v| Ok(contract(&ops::mean_pool(&reshape(6, 3, v)?)?, &w)), x.data(), d.data(), tol))
}

fn cosine(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 6);
    let uv = randn(1, 12, r).into_data();
    let (du, dv) = ops::cosine_sim_backward(&uv[..6], &uv[6..], 1.0)?;
    let analytic: Vec<f64> = du.into_iter().chain(dv).collect();
    Ok(input_check("inputs", |v| ops::cosine_sim(&v[..6], &v[6..]), &uv, &analytic, tol))
}

fn log_softmax(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 7);
    let x = randn(3, 5, r).scale(2.0);
    let w = randn(3, 5, r);
    let out = ops::log_softmax_rows(&x)?;
    let d = ops::log_softmax_rows_backward(&out, &w)?;
    Ok(input_check("input", |v| Ok(contract(&ops::log_softmax_rows(&reshape(3, 5, v)?)?, &w)), x.data(), d.data(), tol))
}

fn speech_encoder(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 8);
    let mut m = SpeechEncoder::<f64>::new("speech", 4, r);
    let x = randn(6, 4, r);
    let w = randn(6, 4, r);
    model_check(
        &mut m,
        |m| Ok(contract(&m.forward(&x)?, &w)),
        |m| {
            let (_, t) = m.forward_trace(&x)?;
            m.backward(&t, &w)
        },
        seed,
        tol,
    )
}

fn text_encoder(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 9);
    let mut m = TextEncoder::<f64>::new("text", 9, 5, r);
    let tokens = [2u32, 8, 8, 0];
    let w = randn(4, 5, r);
    model_check(
        &mut m,
        |m| Ok(contract(&m.forward(&tokens)?, &w)),
        |m| {
            let (_, t) = m.forward_trace(&tokens)?;
            m.backward(&t, &w)
        },
        seed,
        tol,
    )
}

fn adapter(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 10);
    let mut m = Adapter::<f64>::new("adapter", 4, 5, 6, 3, 2, r)?;
    let x = randn(9, 4, r);
    let w = randn(4, 5, r);
    let (_, trace) = m.forward_trace(&x)?;
    let d_x = m.clone().backward(&trace, &w)?;
    let params = model_check(
        &mut m,
        |m| Ok(contract(&m.forward(&x)?, &w)),
        |m| {
            let (_, t) = m.forward_trace(&x)?;
            m.backward(&t, &w).map(|_| ())
        },
        seed,
        tol,
    )?;
    let m2 = m.clone();
    let inputs = input_check("input", |v| Ok(contract(&m2.forward(&reshape(9, 4, v)?)?, &w)), x.data(), d_x.data(), tol);
    Ok(both(params, inputs))
}

fn scale_head(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 11);
    let mut m = ScaleHead::<f64>::new("head", 5, 7, r);
    let p = randn(1, 5, r);
    let w = randn(1, 7, r).into_data();
    let d_p = m.clone().backward(&p, &w)?;
    let params = model_check(&mut m, |m| Ok(ops::dot(&m.forward(&p)?, &w)), |m| m.backward(&p, &w).map(|_| ()), seed, tol)?;
    let m2 = m.clone();
    let inputs = input_check("pooled", |v| Ok(ops::dot(&m2.forward(&reshape(1, 5, v)?)?, &w)), p.data(), d_p.data(), tol);
    Ok(both(params, inputs))
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab: 9,
        speech_dim: 4,
        text_dim: 5,
        embed_dim: 7,
        adapter_hidden: 6,
        kernel: 3,
        stride: 2,
        asr_hidden: 6,
        asr_kernel: 3,
        seed,
    }
}

fn embedding_model(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let mut m = EmbeddingModel::<f64>::new("main", &small_config(seed))?;
    let x = randn(9, 4, &mut rng(seed, 12));
    let docs: [&[u32]; 3] = [&[1, 2, 3], &[4, 4, 0], &[8, 7]];
    let loss = |m: &EmbeddingModel<f64>| {
        let q = m.embed_speech(&x)?;
        let keys: Vec<Vec<f64>> = docs.iter().map(|d| m.embed_text(d)).collect::<Result<_>>()?;
        let negs: Vec<&[f64]> = keys[1..].iter().map(|k| k.as_slice()).collect();
        Ok(info_nce(&q, &keys[0], &negs, 0.5)?.loss)
    };
    let backward = |m: &mut EmbeddingModel<f64>| {
        let (q, qt) = m.embed_speech_trace(&x)?;
        let traced: Vec<_> = docs.iter().map(|d| m.embed_text_trace(d)).collect::<Result<_>>()?;
        let negs: Vec<&[f64]> = traced[1..].iter().map(|(k, _)| k.as_slice()).collect();
        let g = info_nce(&q, &traced[0].0, &negs, 0.5)?;
        m.speech_backward(&qt, &g.grads[0])?;
        for ((_, tr), d) in traced.iter().zip(&g.grads[1..]) {
            m.text_backward(tr, d)?;
        }
        Ok(())
    };
    model_check(&mut m, loss, backward, seed, tol)
}

fn asr_model(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let mut m = AsrModel::<f64>::new("asr", &small_config(seed))?;
    let x = randn(6, 4, &mut rng(seed, 13));
    let target = [1u32, 4, 4];
    model_check(
        &mut m,
        |a| Ok(ctc_loss(&a.log_probs(&x)?, &target)?.loss),
        |a| {
            let tr = a.log_probs_trace(&x)?;
            let g = ctc_loss(&tr.log_probs, &target)?;
            a.backward(&tr, &g.grad)
        },
        seed,
        tol,
    )
}

fn mse(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 14);
    let (zs, zt) = (randn(4, 5, r), randn(6, 5, r));
    let g = mse_align(&zs, &zt)?;
    let x: Vec<f64> = zs.data().iter().chain(zt.data()).copied().collect();
    let analytic: Vec<f64> = g.d_speech.data().iter().chain(g.d_text.data()).copied().collect();
    Ok(input_check(
        "z_s, z_t",
        |v| Ok(mse_align(&reshape(4, 5, &v[..20])?, &reshape(6, 5, &v[20..])?)?.loss),
        &x,
        &analytic,
        tol,
    ))
}

/// Rows of an `n x d` random matrix as separate vectors, flattened together.
fn vectors(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    randn(n, d, r).into_data()
}

fn split(v: &[f64], d: usize) -> Vec<&[f64]> {
    v.chunks(d).collect()
}

fn nce(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let d = 6;
    let x = vectors(5, d, &mut rng(seed, 15));
    let eval = |v: &[f64]| {
        let parts = split(v, d);
        info_nce(parts[0], parts[1], &parts[2..], TAU)
    };
    let analytic: Vec<f64> = eval(&x)?.grads.concat();
    Ok(input_check("q, k+, k-", |v| Ok(eval(v)?.loss), &x, &analytic, tol))
}

fn cls_case(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let d = 6;
    let x = vectors(6, d, &mut rng(seed, 16));
    let eval = |v: &[f64]| {
        let parts = split(v, d);
        cls_contrastive(parts[0], parts[1], &parts[2..], TAU)
    };
    let analytic: Vec<f64> = eval(&x)?.grads.concat();
    Ok(input_check("x, y+, y-", |v| Ok(eval(v)?.loss), &x, &analytic, tol))
}

fn cosent_case(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let d = 5;
    let x = vectors(4, d, &mut rng(seed, 17));
    let pairs = [GradedPair::new(0, 1, 2.0), GradedPair::new(0, 2, 1.0), GradedPair::new(0, 3, 0.0)];
    let eval = |v: &[f64]| cosent(&split(v, d), &pairs, TAU);
    let analytic: Vec<f64> = eval(&x)?.grads.concat();
    Ok(input_check("items", |v| Ok(eval(v)?.loss), &x, &analytic, tol))
}

fn ctc(seed: u64, tol: GradTolerance) -> Result<std::result::Result<usize, String>> {
    let r = &mut rng(seed, 18);
    let logits = randn(7, 5, r);
    let target = [1u32, 2, 2, (seed % 4) as u32];
    let lp = ops::log_softmax_rows(&logits)?;
    let g = ctc_loss(&lp, &target)?;
    let d = ops::log_softmax_rows_backward(&lp, &g.grad)?;
    Ok(input_check(
        "logits",
        |v| Ok(ctc_loss(&ops::log_softmax_rows(&reshape(7, 5, v)?)?, &target)?.loss),
        logits.data(),
        d.data(),
        tol,
    ))
}
