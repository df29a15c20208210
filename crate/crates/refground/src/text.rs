//! Expression encoding: tokenize, pad/truncate, embed, and run a two-layer
//! bidirectional LSTM whose four final states concatenate into the text
//! feature of dimension 4H.
//!
//! Contract notes:
//! - sequences are padded to exactly `t_max` ids; there is no length masking,
//!   the PAD embedding row is pinned to zero instead;
//! - the backward direction's "final" output is the one produced at the first
//!   input position (after the reverse pass has consumed the whole sequence);
//! - gate order inside stacked matrices is input, forget, candidate, output.

use crate::nn::{self, Param};
use crate::rng::Rng;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

/// Token table with PAD = 0 and UNK = 1 always present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from a corpus; distinct tokens sorted so identical corpora yield
    /// identical id assignments.
    pub fn from_corpus<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = words.into_iter().map(|w| w.to_string()).collect();
        set.sort();
        set.dedup();
        let mut v = Vocabulary {
            tokens: set,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED {
            return Some(if id == PAD_ID { "<pad>" } else { "<unk>" });
        }
        self.tokens.get(id - RESERVED).map(|s| s.as_str())
    }

    /// Total id count including PAD and UNK.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    /// One token per line; line number = id - 2.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        let mut v = Vocabulary {
            tokens,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }
}

/// Lowercase, drop special characters, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Fixed-length id sequence; pads only at the tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

/// Keep the first `t_max` tokens, pad shorter inputs with PAD at the tail.
/// Empty input yields an all-PAD sequence with true_length 0.
pub fn pad_truncate(vocab: &Vocabulary, words: &[String], t_max: usize) -> TokenSequence {
    assert!(t_max >= 1, "t_max must be >= 1");
    let kept = words.len().min(t_max);
    let mut ids: Vec<usize> = words[..kept].iter().map(|w| vocab.id(w)).collect();
    ids.resize(t_max, PAD_ID);
    TokenSequence {
        ids,
        true_length: kept,
    }
}

/// tokenize + pad_truncate in one call.
pub fn encode_expression(vocab: &Vocabulary, text: &str, t_max: usize) -> TokenSequence {
    pad_truncate(vocab, &tokenize(text), t_max)
}

/// Learned embedding table; row 0 (PAD) is zero and stays zero through
/// training (the optimizer skips it via `fixed_prefix`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub table: Param,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        // unit-ish scale so token identity is visible to the recurrent stack
        // from the first step
        let mut table = Param::uniform_scaled("embedding.table", vocab_size, dim, 0.5, rng);
        for v in table.value[..dim].iter_mut() {
            *v = 0.0;
        }
        table.fixed_prefix = dim;
        EmbeddingTable { table, dim }
    }

    pub fn lookup(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }
}

/// One LSTM direction of one layer. Stacked gate matrices, rows ordered
/// input / forget / candidate / output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub w: Param, // 4H x input_dim
    pub u: Param, // 4H x H
    pub b: Param, // 4H x 1
    pub hidden: usize,
    pub input: usize,
}

/// Per-sequence forward caches for one cell, in processing order.
pub struct LstmRun {
    pub h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>, // 4H post-activation per step: [i | f | g | o]
    tanh_c: Vec<Vec<f64>>,
}

impl LstmCell {
    pub fn new(prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        // forget-gate bias starts at 1 so early cell state is retained
        let mut b = Param::zeros(&format!("{prefix}.b"), 4 * hidden, 1);
        for v in b.value[hidden..2 * hidden].iter_mut() {
            *v = 1.0;
        }
        LstmCell {
            w: Param::uniform(&format!("{prefix}.w"), 4 * hidden, input, input, rng),
            u: Param::uniform(&format!("{prefix}.u"), 4 * hidden, hidden, hidden, rng),
            b,
            hidden,
            input,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }

    /// Run the cell over `inputs` (already in processing order), starting
    /// from zero hidden and cell states.
    pub fn forward_seq(&self, inputs: &[&[f64]]) -> LstmRun {
        let hs = self.hidden;
        let steps = inputs.len();
        let mut run = LstmRun {
            h: Vec::with_capacity(steps),
            c: Vec::with_capacity(steps),
            gates: Vec::with_capacity(steps),
            tanh_c: Vec::with_capacity(steps),
        };
        let zero = vec![0.0; hs];
        for (k, x) in inputs.iter().enumerate() {
            let h_prev = if k == 0 { &zero } else { &run.h[k - 1] };
            let c_prev = if k == 0 { &zero } else { &run.c[k - 1] };

            let mut pre = vec![0.0; 4 * hs];
            nn::matvec(&self.w.value, 4 * hs, self.input, x, &mut pre);
            nn::matvec_acc(&self.u.value, 4 * hs, hs, h_prev, &mut pre);
            for (p, b) in pre.iter_mut().zip(&self.b.value) {
                *p += b;
            }

            let mut gates = pre;
            for j in 0..hs {
                gates[j] = nn::sigmoid(gates[j]); // input gate
                gates[hs + j] = nn::sigmoid(gates[hs + j]); // forget gate
                gates[2 * hs + j] = gates[2 * hs + j].tanh(); // candidate
                gates[3 * hs + j] = nn::sigmoid(gates[3 * hs + j]); // output gate
            }

            let mut c = vec![0.0; hs];
            let mut tc = vec![0.0; hs];
            let mut h = vec![0.0; hs];
            for j in 0..hs {
                c[j] = gates[hs + j] * c_prev[j] + gates[j] * gates[2 * hs + j];
                tc[j] = c[j].tanh();
                h[j] = gates[3 * hs + j] * tc[j];
            }
            run.h.push(h);
            run.c.push(c);
            run.gates.push(gates);
            run.tanh_c.push(tc);
        }
        run
    }

    /// Backpropagate through time. `d_h_ext[k]` is the externally injected
    /// gradient into the step-k output; input gradients accumulate into
    /// `d_inputs[k]`. Parameter gradients accumulate into the cell.
    pub fn backward_seq(
        &mut self,
        run: &LstmRun,
        inputs: &[&[f64]],
        d_h_ext: &[Vec<f64>],
        d_inputs: &mut [Vec<f64>],
    ) {
        let hs = self.hidden;
        let steps = inputs.len();
        let zero = vec![0.0; hs];
        let mut dh_carry = vec![0.0; hs];
        let mut dc_carry = vec![0.0; hs];
        let mut dpre = vec![0.0; 4 * hs];

        for k in (0..steps).rev() {
            let gates = &run.gates[k];
            let tc = &run.tanh_c[k];
            let c_prev = if k == 0 { &zero } else { &run.c[k - 1] };
            let h_prev = if k == 0 { &zero } else { &run.h[k - 1] };

            for j in 0..hs {
                let dh = dh_carry[j] + d_h_ext[k][j];
                let i = gates[j];
                let f = gates[hs + j];
                let g = gates[2 * hs + j];
                let o = gates[3 * hs + j];

                let d_o = dh * tc[j];
                let dc_total = dc_carry[j] + dh * o * nn::dtanh_from_y(tc[j]);

                dpre[j] = dc_total * g * nn::dsigmoid_from_y(i);
                dpre[hs + j] = dc_total * c_prev[j] * nn::dsigmoid_from_y(f);
                dpre[2 * hs + j] = dc_total * i * nn::dtanh_from_y(g);
                dpre[3 * hs + j] = d_o * nn::dsigmoid_from_y(o);

                dc_carry[j] = dc_total * f;
            }

            nn::outer_acc(&mut self.w.grad, &dpre, inputs[k]);
            nn::outer_acc(&mut self.u.grad, &dpre, h_prev);
            for (db, &d) in self.b.grad.iter_mut().zip(&dpre) {
                *db += d;
            }
            nn::matvec_t_acc(&self.w.value, 4 * hs, self.input, &dpre, &mut d_inputs[k]);
            dh_carry.iter_mut().for_each(|v| *v = 0.0);
            nn::matvec_t_acc(&self.u.value, 4 * hs, hs, &dpre, &mut dh_carry);
        }
    }
}

/// Two stacked bidirectional LSTM layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiRnnParams {
    pub l1_fw: LstmCell,
    pub l1_bw: LstmCell,
    pub l2_fw: LstmCell,
    pub l2_bw: LstmCell,
    pub hidden: usize,
}

impl BiRnnParams {
    pub fn new(d_w: usize, hidden: usize, rng: &mut Rng) -> Self {
        BiRnnParams {
            l1_fw: LstmCell::new("rnn.l1_fw", d_w, hidden, rng),
            l1_bw: LstmCell::new("rnn.l1_bw", d_w, hidden, rng),
            l2_fw: LstmCell::new("rnn.l2_fw", 2 * hidden, hidden, rng),
            l2_bw: LstmCell::new("rnn.l2_bw", 2 * hidden, hidden, rng),
            hidden,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.l1_fw.params_mut();
        ps.extend(self.l1_bw.params_mut());
        ps.extend(self.l2_fw.params_mut());
        ps.extend(self.l2_bw.params_mut());
        ps
    }
}

/// Expression vector of dimension 4H.
pub type TextFeature = Vec<f64>;

/// Everything the text backward pass needs.
pub struct TextCache {
    ids: Vec<usize>,
    xs: Vec<Vec<f64>>,
    run1f: LstmRun,
    run1b: LstmRun,
    y1: Vec<Vec<f64>>, // per time step, [h1_fw ; h1_bw], dimension 2H
    run2f: LstmRun,
    run2b: LstmRun,
}

/// Embedding + BiRNN bundled with its dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoder {
    pub embedding: EmbeddingTable,
    pub rnn: BiRnnParams,
    pub t_max: usize,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, d_w: usize, hidden: usize, t_max: usize, rng: &mut Rng) -> Self {
        TextEncoder {
            embedding: EmbeddingTable::new(vocab_size, d_w, rng),
            rnn: BiRnnParams::new(d_w, hidden, rng),
            t_max,
        }
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.rnn.hidden
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.embedding.table];
        ps.extend(self.rnn.params_mut());
        ps
    }

    /// Encode a padded sequence into v_E = [h1_fw; h1_bw; h2_fw; h2_bw].
    pub fn forward(&self, seq: &TokenSequence) -> Result<(TextFeature, TextCache)> {
        if seq.ids.len() != self.t_max {
            return Err(Error::Shape(format!(
                "sequence length {} != t_max {}",
                seq.ids.len(),
                self.t_max
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= self.embedding.table.rows) {
            return Err(Error::Shape(format!(
                "token id {bad} outside embedding table ({} rows)",
                self.embedding.table.rows
            )));
        }
        let t = self.t_max;
        let hs = self.rnn.hidden;

        let xs: Vec<Vec<f64>> = seq
            .ids
            .iter()
            .map(|&id| self.embedding.lookup(id).to_vec())
            .collect();
        let fwd_inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let bwd_inputs: Vec<&[f64]> = xs.iter().rev().map(|x| x.as_slice()).collect();

        let run1f = self.rnn.l1_fw.forward_seq(&fwd_inputs);
        let run1b = self.rnn.l1_bw.forward_seq(&bwd_inputs);

        // y1[time] = [h1_fw[time] ; h1_bw[time]]; the bw run stores states in
        // processing order, so time t lives at index T-1-t.
        let y1: Vec<Vec<f64>> = (0..t)
            .map(|time| {
                let mut v = run1f.h[time].clone();
                v.extend_from_slice(&run1b.h[t - 1 - time]);
                v
            })
            .collect();
        let y1_fwd: Vec<&[f64]> = y1.iter().map(|v| v.as_slice()).collect();
        let y1_bwd: Vec<&[f64]> = y1.iter().rev().map(|v| v.as_slice()).collect();

        let run2f = self.rnn.l2_fw.forward_seq(&y1_fwd);
        let run2b = self.rnn.l2_bw.forward_seq(&y1_bwd);

        let mut v_e = Vec::with_capacity(4 * hs);
        v_e.extend_from_slice(&run1f.h[t - 1]);
        v_e.extend_from_slice(&run1b.h[t - 1]); // bw final = output at first position
        v_e.extend_from_slice(&run2f.h[t - 1]);
        v_e.extend_from_slice(&run2b.h[t - 1]);

        Ok((
            v_e,
            TextCache {
                ids: seq.ids.clone(),
                xs,
                run1f,
                run1b,
                y1,
                run2f,
                run2b,
            },
        ))
    }

    /// Accumulate parameter gradients given the gradient of some scalar loss
    /// with respect to v_E.
    pub fn backward(&mut self, cache: &TextCache, d_ve: &[f64]) {
        let t = self.t_max;
        let hs = self.rnn.hidden;
        debug_assert_eq!(d_ve.len(), 4 * hs);

        let zeros = || vec![vec![0.0; hs]; t];
        let zeros2h = || vec![vec![0.0; 2 * hs]; t];

        // Layer 2, both directions: external gradient only at the final
        // processing step; input gradients land on y1.
        let mut d_ext_2f = zeros();
        d_ext_2f[t - 1] = d_ve[2 * hs..3 * hs].to_vec();
        let mut d_ext_2b = zeros();
        d_ext_2b[t - 1] = d_ve[3 * hs..4 * hs].to_vec();

        let y1_fwd: Vec<&[f64]> = cache.y1.iter().map(|v| v.as_slice()).collect();
        let y1_bwd: Vec<&[f64]> = cache.y1.iter().rev().map(|v| v.as_slice()).collect();

        let mut d_y1_from_2f = zeros2h();
        self.rnn
            .l2_fw
            .backward_seq(&cache.run2f, &y1_fwd, &d_ext_2f, &mut d_y1_from_2f);
        let mut d_y1_from_2b = zeros2h();
        self.rnn
            .l2_bw
            .backward_seq(&cache.run2b, &y1_bwd, &d_ext_2b, &mut d_y1_from_2b);

        // Gather the total gradient into each y1[time] and split into the two
        // layer-1 directions, adding the v_E chunks for the final states.
        let mut d_ext_1f = zeros();
        let mut d_ext_1b = zeros();
        for time in 0..t {
            let mut dy = d_y1_from_2f[time].clone();
            // the bw layer consumed y1 reversed: its step k took y1[T-1-k]
            for (a, b) in dy.iter_mut().zip(&d_y1_from_2b[t - 1 - time]) {
                *a += b;
            }
            d_ext_1f[time]
                .iter_mut()
                .zip(&dy[..hs])
                .for_each(|(a, b)| *a += b);
            // bw run stores time t at processing index T-1-t
            d_ext_1b[t - 1 - time]
                .iter_mut()
                .zip(&dy[hs..])
                .for_each(|(a, b)| *a += b);
        }
        for (a, b) in d_ext_1f[t - 1].iter_mut().zip(&d_ve[..hs]) {
            *a += b;
        }
        for (a, b) in d_ext_1b[t - 1].iter_mut().zip(&d_ve[hs..2 * hs]) {
            *a += b;
        }

        let fwd_inputs: Vec<&[f64]> = cache.xs.iter().map(|x| x.as_slice()).collect();
        let bwd_inputs: Vec<&[f64]> = cache.xs.iter().rev().map(|x| x.as_slice()).collect();
        let d_w = self.embedding.dim;
        let mut d_xs_f = vec![vec![0.0; d_w]; t];
        let mut d_xs_b = vec![vec![0.0; d_w]; t];
        self.rnn
            .l1_fw
            .backward_seq(&cache.run1f, &fwd_inputs, &d_ext_1f, &mut d_xs_f);
        self.rnn
            .l1_bw
            .backward_seq(&cache.run1b, &bwd_inputs, &d_ext_1b, &mut d_xs_b);

        // Scatter embedding gradients (bw consumed inputs reversed).
        for time in 0..t {
            let id = cache.ids[time];
            let row = &mut self.embedding.table.grad[id * d_w..(id + 1) * d_w];
            for (g, (a, b)) in row
                .iter_mut()
                .zip(d_xs_f[time].iter().zip(&d_xs_b[t - 1 - time]))
            {
                *g += a + b;
            }
        }
    }
}
