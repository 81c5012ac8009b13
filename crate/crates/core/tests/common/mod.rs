//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the engine's layer, pruning or annealing code; only the
//! weights, embeddings and a few tensor primitives are borrowed.

#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

use vistrim::annealing::AttenuationKind;
use vistrim::pruning::PruneKind;
use vistrim::tensor::{rms_normalize, silu, sinusoidal_position};
use vistrim::{Model, ModelConfig, Policies, Prompt, Seed};

pub const NEG: f64 = f64::NEG_INFINITY;

pub fn toy_model(seed: u64) -> Model {
    Model::new(ModelConfig {
        seed: Seed(seed),
        ..ModelConfig::toy()
    })
    .unwrap()
}

pub fn toy_prompt(model: &Model, seed: u64) -> Prompt {
    // 20 visual + 8 text tokens
    model.build_prompt(3, 20, 5, Seed(seed)).unwrap()
}

fn vec_mat(v: &[f64], w: &vistrim::Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &x) in v.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += x * wij;
        }
    }
    out
}

fn softmax_masked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(NEG, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .map(|&s| if s == NEG { 0.0 } else { (s - max).exp() })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Top `k` indices by descending score, lower index first on ties, via a
/// full sort.
pub fn sort_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Per-layer keep counts and prune layers, written from the schedule's
/// definition rather than the library helpers.
pub fn oracle_schedule(policies: &Policies, num_layers: usize, n_visual: usize) -> (Vec<usize>, Vec<bool>) {
    let s = &policies.schedule;
    let of = |micros: i64| -> usize { ((micros.max(0) as i128 * n_visual as i128) / 1_000_000) as usize };
    let mut keep = Vec::new();
    let mut prune = Vec::new();
    for l in 0..num_layers {
        let (k, p) = match s.kind {
            PruneKind::None => (n_visual, false),
            PruneKind::Pvtp => {
                if l < s.start_layer {
                    (n_visual, false)
                } else {
                    let j = ((l - s.start_layer) / s.stride) as i64;
                    let f = 1_000_000 - s.first_ratio.micros() - j * s.step_ratio.micros();
                    (of(f), (l - s.start_layer) % s.stride == 0)
                }
            }
            PruneKind::FastvLike => {
                if l < s.fastv_layer {
                    (n_visual, false)
                } else {
                    (of(1_000_000 - s.fastv_ratio.micros()), l == s.fastv_layer)
                }
            }
            PruneKind::VtwLike => {
                let cut = s.vtw_cut_layer.unwrap_or(num_layers / 2);
                if l < cut {
                    (n_visual, false)
                } else {
                    (0, l == cut)
                }
            }
        };
        keep.push(k);
        prune.push(p);
    }
    (keep, prune)
}

pub fn oracle_beta(policies: &Policies, t: usize) -> f64 {
    let a = &policies.attenuation;
    let t = t as f64;
    match a.kind {
        AttenuationKind::None => 1.0,
        AttenuationKind::Cosine => {
            if t < a.tau {
                (FRAC_PI_2 * t / a.tau).cos()
            } else {
                0.0
            }
        }
        AttenuationKind::Linear => (1.0 - t / a.tau).max(0.0),
        AttenuationKind::Exponential => (-t / a.sigma).exp(),
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Logits of the row fed at each step (step 0 = last prompt row).
    pub logits: Vec<Vec<f64>>,
    /// Visual positions each step's query sees, per step then layer.
    pub visible: Vec<Vec<Vec<usize>>>,
    /// Head-mean attention of each step's query row, per step then layer,
    /// over all rows of the sequence (zeros where masked).
    pub last_rows: Vec<Vec<Vec<f64>>>,
}

struct Row {
    position: usize,
    visual: bool,
    /// Step whose forward feeds this row; prompt rows are step 0.
    step: usize,
}

/// Uncached recomputation: one masked forward over the prompt followed by
/// the given output tokens, replaying the selection rules from scratch.
pub fn oracle_forward(model: &Model, prompt: &Prompt, policies: &Policies, tokens: &[u32]) -> OracleResult {
    let cfg = &model.config;
    let (num_layers, d, h) = (cfg.num_layers, cfg.model_dim, cfg.num_heads);
    let hd = d / h;
    let lay = &prompt.layout;
    let n_prompt = lay.len();
    let n_visual = lay.n_visual();
    let steps = tokens.len();

    let mut rows = Vec::new();
    let mut hidden: Vec<Vec<f64>> = Vec::new();
    for r in 0..n_prompt {
        let visual = r >= lay.n_system && r < lay.n_system + n_visual;
        rows.push(Row {
            position: r,
            visual,
            step: 0,
        });
        hidden.push(prompt.embeddings.row(r).to_vec());
    }
    for s in 1..steps {
        let pos = n_prompt + s - 1;
        rows.push(Row {
            position: pos,
            visual: false,
            step: s,
        });
        let pe = sinusoidal_position(pos, d);
        hidden.push(
            model
                .embed
                .row(tokens[s - 1] as usize)
                .iter()
                .zip(pe)
                .map(|(e, p)| e + p)
                .collect(),
        );
    }
    let n = rows.len();
    let last_prompt = n_prompt - 1;
    let query_row = |s: usize| if s == 0 { last_prompt } else { n_prompt + s - 1 };

    let (keep, prune) = oracle_schedule(policies, num_layers, n_visual);
    let mut live: Vec<bool> = vec![true; n];
    let mut inherited: Option<Vec<usize>> = None;
    let mut prev_last: Option<Vec<f64>> = None;
    let mut reuse: Option<Vec<Vec<Vec<f64>>>> = None;

    let mut visible = vec![vec![Vec::new(); num_layers]; steps];
    let mut last_rows = vec![vec![Vec::new(); num_layers]; steps];

    for l in 0..num_layers {
        let w = &model.layers[l];
        let lazy = policies.heredity.is_lazy(l);

        if prune[l] {
            let scores_from = prev_last.as_ref().expect("prune needs a previous layer");
            let cand: Vec<usize> = (0..n).filter(|&j| live[j] && rows[j].visual).collect();
            let sc: Vec<f64> = cand.iter().map(|&j| scores_from[j]).collect();
            let top = sort_top(&sc, keep[l]);
            let ranked: Vec<usize> = top.iter().map(|&i| rows[cand[i]].position).collect();
            for &j in &cand {
                if !ranked.contains(&rows[j].position) {
                    live[j] = false;
                }
            }
            inherited = Some(ranked);
        }

        let normed: Vec<Vec<f64>> = hidden.iter().map(|x| rms_normalize(x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &w.wv)).collect();

        // prompt queries first: the ranking comes from them
        let probs: Vec<Vec<Vec<f64>>> = if lazy {
            reuse.clone().expect("lazy layer without a source")
        } else {
            let q: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &w.wq)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &w.wk)).collect();
            let scale = 1.0 / (hd as f64).sqrt();
            let prompt_mask = |i: usize, j: usize| live[j] && j < n_prompt && j <= i;
            let mut p = vec![vec![vec![0.0; n]; n]; h];
            for head in 0..h {
                let c = head * hd..(head + 1) * hd;
                for i in 0..n_prompt {
                    if !live[i] {
                        continue;
                    }
                    let sc: Vec<f64> = (0..n)
                        .map(|j| {
                            if prompt_mask(i, j) {
                                q[i][c.clone()].iter().zip(&k[j][c.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale
                            } else {
                                NEG
                            }
                        })
                        .collect();
                    p[head][i] = softmax_masked(&sc);
                }
            }
            let own_last = head_mean(&p, last_prompt);
            let ranking = match &inherited {
                Some(r) => r.clone(),
                None => {
                    let cand: Vec<usize> = (0..n).filter(|&j| live[j] && rows[j].visual).collect();
                    let sc: Vec<f64> = cand.iter().map(|&j| own_last[j]).collect();
                    sort_top(&sc, cand.len()).iter().map(|&i| rows[cand[i]].position).collect()
                }
            };
            let prefill_count = (0..n).filter(|&j| live[j] && rows[j].visual).count();
            let vis_at: Vec<Vec<usize>> = (0..steps)
                .map(|s| {
                    let b = oracle_beta(policies, s);
                    let target = ((prefill_count as f64 * b + 1e-9).floor() as usize).min(prefill_count);
                    let mut v: Vec<usize> = if s == 0 { ranking.clone() } else { ranking[..target.min(ranking.len())].to_vec() };
                    v.sort_unstable();
                    v
                })
                .collect();
            for head in 0..h {
                let c = head * hd..(head + 1) * hd;
                for i in n_prompt..n {
                    let s = rows[i].step;
                    let sc: Vec<f64> = (0..n)
                        .map(|j| {
                            let ok = live[j]
                                && j <= i
                                && (!rows[j].visual || vis_at[s].binary_search(&rows[j].position).is_ok());
                            if ok {
                                q[i][c.clone()].iter().zip(&k[j][c.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale
                            } else {
                                NEG
                            }
                        })
                        .collect();
                    p[head][i] = softmax_masked(&sc);
                }
            }
            for s in 0..steps {
                visible[s][l] = vis_at[s].clone();
            }
            reuse = Some(p.clone());
            p
        };
        if lazy {
            for s in 0..steps {
                visible[s][l] = visible[s][l - 1].clone();
            }
        }

        let mut next = hidden.clone();
        for i in 0..n {
            if !live[i] {
                continue;
            }
            let mut heads = vec![0.0; d];
            for head in 0..h {
                for j in 0..n {
                    let a = probs[head][i][j];
                    if a == 0.0 {
                        continue;
                    }
                    for c in head * hd..(head + 1) * hd {
                        heads[c] += a * v[j][c];
                    }
                }
            }
            let attn = vec_mat(&heads, &w.wo);
            let resid: Vec<f64> = hidden[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let n2 = rms_normalize(&resid);
            let gate = vec_mat(&n2, &w.w_gate);
            let up = vec_mat(&n2, &w.w_up);
            let mix: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let down = vec_mat(&mix, &w.w_down);
            next[i] = resid.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
        for s in 0..steps {
            last_rows[s][l] = head_mean(&probs, query_row(s));
        }
        prev_last = Some(head_mean(&probs, last_prompt));
        hidden = next;
    }

    let logits = (0..steps)
        .map(|s| vec_mat(&rms_normalize(&hidden[query_row(s)]), &model.lm_head))
        .collect();
    OracleResult {
        logits,
        visible,
        last_rows,
    }
}

fn head_mean(p: &[Vec<Vec<f64>>], row: usize) -> Vec<f64> {
    let n = p[0][row].len();
    let mut m = vec![0.0; n];
    for head in p {
        for (a, b) in m.iter_mut().zip(&head[row]) {
            *a += b;
        }
    }
    m.iter().map(|x| x / p.len() as f64).collect()
}

/// Plain greedy decoder with per-layer key/value lists, fed one token at a
/// time (prompt included). Returns emitted tokens and their logits.
pub fn vanilla_generate(model: &Model, prompt: &Prompt, max_new_tokens: usize) -> (Vec<u32>, Vec<Vec<f64>>) {
    let cfg = &model.config;
    let (num_layers, d, h) = (cfg.num_layers, cfg.model_dim, cfg.num_heads);
    let hd = d / h;
    let mut keys: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_layers];
    let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_layers];

    let step = |x: Vec<f64>, keys: &mut Vec<Vec<Vec<f64>>>, values: &mut Vec<Vec<Vec<f64>>>| -> Vec<f64> {
        let mut x = x;
        for l in 0..num_layers {
            let w = &model.layers[l];
            let xn = rms_normalize(&x);
            let q = vec_mat(&xn, &w.wq);
            keys[l].push(vec_mat(&xn, &w.wk));
            values[l].push(vec_mat(&xn, &w.wv));
            let mut heads = vec![0.0; d];
            for head in 0..h {
                let c = head * hd..(head + 1) * hd;
                let sc: Vec<f64> = keys[l]
                    .iter()
                    .map(|k| q[c.clone()].iter().zip(&k[c.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let p = softmax_masked(&sc);
                for (a, v) in p.iter().zip(&values[l]) {
                    for cc in c.clone() {
                        heads[cc] += a * v[cc];
                    }
                }
            }
            let attn = vec_mat(&heads, &w.wo);
            let resid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let n2 = rms_normalize(&resid);
            let gate = vec_mat(&n2, &w.w_gate);
            let up = vec_mat(&n2, &w.w_up);
            let mix: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let down = vec_mat(&mix, &w.w_down);
            x = resid.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
        vec_mat(&rms_normalize(&x), &model.lm_head)
    };

    let n_prompt = prompt.layout.len();
    let mut logits = Vec::new();
    for r in 0..n_prompt {
        logits = step(prompt.embeddings.row(r).to_vec(), &mut keys, &mut values);
    }
    let mut tokens = Vec::new();
    let mut all_logits = Vec::new();
    for s in 0..max_new_tokens {
        let tok = argmax_first(&logits);
        tokens.push(tok);
        all_logits.push(logits.clone());
        if s + 1 == max_new_tokens {
            break;
        }
        let pos = n_prompt + s;
        let pe = sinusoidal_position(pos, d);
        let x: Vec<f64> = model.embed.row(tok as usize).iter().zip(pe).map(|(e, p)| e + p).collect();
        logits = step(x, &mut keys, &mut values);
    }
    (tokens, all_logits)
}

pub fn argmax_first(v: &[f64]) -> u32 {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as u32
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `PASS`/`FAIL` line in the acceptance log format.
pub fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("[{}] criterion {id}: {name} ({detail})", if ok { "PASS" } else { "FAIL" });
}
