// SPDX-License-Identifier: Apache-2.0

//! Utterance encoders, the BiLSTM context encoder and the projection MLP.
//!
//! Everything here records onto a [`Tape`]; parameters live in a
//! [`ParamStore`] and are referenced by [`ParamId`].

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

fn uniform(rng: &mut dyn RngCore, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// `x · W + b` with `W: [in × out]`, `b: [1 × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform(±1/√in) init for both weight and bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: store.register(format!("{name}.w"), uniform(rng, &[input, output], bound)),
            b: store.register(format!("{name}.b"), uniform(rng, &[1, output], bound)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Arithmetic mean of the unmasked rows of `token_embeds`.
pub fn encode_avg(token_embeds: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (t, d) = match *token_embeds.shape() {
        [t, d] => (t, d),
        _ => return Err(Error::invalid("encode_avg", "expected a [T × d] matrix")),
    };
    if mask.len() != t {
        return Err(Error::shape("encode_avg", token_embeds.shape(), &[mask.len()]));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::invalid("encode_avg", "every token is masked"));
    }
    let mut out = vec![0.0; d];
    for (row, _) in token_embeds.data().chunks(d).zip(mask).filter(|(_, m)| **m) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Tensor::new(vec![1, d], out)
}

/// Kim-style CNN: one filter bank per window width, relu, max over positions.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    banks: Vec<(usize, Linear)>,
    filters: usize,
}

impl CnnEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        widths: &[usize],
        filters: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let banks = widths
            .iter()
            .map(|&w| (w, Linear::new(store, &format!("{name}.conv{w}"), w * embed_dim, filters, rng)))
            .collect();
        Self { banks, filters }
    }

    pub fn output_dim(&self) -> usize {
        self.banks.len() * self.filters
    }

    /// Widest window; shorter utterances are zero-padded up to it.
    pub fn max_width(&self) -> usize {
        self.banks.iter().map(|(w, _)| *w).max().unwrap_or(1)
    }

    /// Encodes each `[T_i × d]` utterance into one row of the `[L × output_dim]` result.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, utterances: &[Var]) -> Result<Var> {
        let pad_to = self.max_width();
        let mut padded = Vec::with_capacity(utterances.len());
        for &u in utterances {
            let t = tape.shape(u)[0];
            if t < pad_to {
                let d = tape.shape(u)[1];
                let zeros = tape.constant(Tensor::zeros(&[pad_to - t, d]))?;
                padded.push(tape.concat_rows(&[u, zeros])?);
            } else {
                padded.push(u);
            }
        }
        let mut pooled = Vec::with_capacity(self.banks.len());
        for (width, lin) in &self.banks {
            let mut windows = Vec::with_capacity(padded.len());
            let mut lengths = Vec::with_capacity(padded.len());
            for &u in &padded {
                let win = tape.unfold(u, *width)?;
                lengths.push(tape.shape(win)[0]);
                windows.push(win);
            }
            let stacked = tape.concat_rows(&windows)?;
            let conv = lin.forward(tape, store, stacked)?;
            let act = tape.relu(conv)?;
            pooled.push(tape.segment_max(act, &lengths)?);
        }
        tape.concat_cols(&pooled)
    }
}

/// Single-direction LSTM with gate layout `[input | forget | cell | output]`.
#[derive(Clone, Debug)]
pub struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Lstm {
    /// Uniform(±1/√hidden) weights; forget-gate bias starts at +1.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = store.register(format!("{name}.wx"), uniform(rng, &[input, 4 * hidden], bound));
        let wh = store.register(format!("{name}.wh"), uniform(rng, &[hidden, 4 * hidden], bound));
        let mut bias = uniform(rng, &[1, 4 * hidden], bound);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v += 1.0);
        let b = store.register(format!("{name}.b"), bias);
        Self { wx, wh, b, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Hidden states `[1 × H]` for every row of `x`, returned in row order.
    /// With `reverse` the recurrence runs from the last row to the first.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let len = tape.shape(x)[0];
        let h = self.hidden;
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, wx)?;
        let pre = tape.add(xw, b)?;

        let mut states = vec![None; len];
        let mut prev: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let mut gates = tape.slice_rows(pre, t, 1)?;
            if let Some((h_prev, _)) = prev {
                let rec = tape.matmul(h_prev, wh)?;
                gates = tape.add(gates, rec)?;
            }
            let i = tape.slice_cols(gates, 0, h)?;
            let f = tape.slice_cols(gates, h, h)?;
            let g = tape.slice_cols(gates, 2 * h, h)?;
            let o = tape.slice_cols(gates, 3 * h, h)?;
            let i = tape.sigmoid(i)?;
            let g = tape.tanh(g)?;
            let o = tape.sigmoid(o)?;
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = prev {
                let f = tape.sigmoid(f)?;
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(c, keep)?;
            }
            let tc = tape.tanh(c)?;
            let h_t = tape.mul(o, tc)?;
            states[t] = Some(h_t);
            prev = Some((h_t, c));
        }
        Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Context encoding: row `j` is `[forward state at j | backward state at j]`.
    pub fn encode_sequence(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.fwd.run(tape, store, x, false)?;
        let b = self.bwd.run(tape, store, x, true)?;
        let f = tape.concat_rows(&f)?;
        let b = tape.concat_rows(&b)?;
        tape.concat_cols(&[f, b])
    }

    /// As [`BiLstm::encode_sequence`] over the unmasked prefix; masked rows are zero.
    pub fn encode_context(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        let real = mask.iter().take_while(|m| **m).count();
        if real == 0 || mask[real..].iter().any(|m| *m) || mask.len() != tape.shape(x)[0] {
            return Err(Error::invalid("encode_context", "mask must be a nonempty real prefix over every row"));
        }
        let xs = tape.slice_rows(x, 0, real)?;
        let out = self.encode_sequence(tape, store, xs)?;
        if real == mask.len() {
            return Ok(out);
        }
        let pad = tape.constant(Tensor::zeros(&[mask.len() - real, self.output_dim()]))?;
        tape.concat_rows(&[out, pad])
    }

    /// Utterance encoding: `[forward state at the last row | backward state at the first row]`.
    pub fn encode_final(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.fwd.run(tape, store, x, false)?;
        let b = self.bwd.run(tape, store, x, true)?;
        tape.concat_cols(&[*f.last().expect("nonempty"), b[0]])
    }
}

/// `affine → relu → dropout → affine`.
#[derive(Clone, Debug)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
    dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), input, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, output, rng),
            dropout,
        }
    }

    /// `rng = None` runs in evaluation mode (no dropout).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.dropout, rng)?;
        self.l2.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn zero_all(store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.tensor_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        uniform(rng, &[r, c], 1.0)
    }

    #[test]
    fn avg_excludes_padding() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(encode_avg(&v, &[true]).unwrap().data(), &[1.0, 0.0, 0.0]);

        let two = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(encode_avg(&two, &[true, true]).unwrap().data(), &[0.5, 0.5, 0.0]);
        assert_eq!(encode_avg(&two, &[true, false]).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert!(encode_avg(&two, &[false, false]).is_err());
    }

    #[test]
    fn cnn_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let cnn = CnnEncoder::new(&mut store, "cnn", 4, &[3, 4, 5], 6, &mut rng());
        for p in store.iter_mut().filter(|p| p.name().ends_with(".b")) {
            p.tensor_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[7, 4])).unwrap();
        let out = cnn.encode(&mut tape, &store, &[u]).unwrap();
        assert_eq!(tape.shape(out), &[1, 18]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    /// Independent sliding-window dot products, written without the tape.
    fn naive_cnn(store: &ParamStore, x: &Tensor, widths: &[usize], filters: usize) -> Vec<f64> {
        let (t, d) = (x.rows(), x.cols());
        let t_pad = t.max(*widths.iter().max().unwrap());
        let at = |pos: usize, j: usize| if pos < t { x.get2(pos, j) } else { 0.0 };
        let mut out = Vec::new();
        for &w in widths {
            let weight = store.tensor(store.find(&format!("cnn.conv{w}.w")).unwrap());
            let bias = store.tensor(store.find(&format!("cnn.conv{w}.b")).unwrap());
            for f in 0..filters {
                let mut best = f64::NEG_INFINITY;
                for start in 0..=t_pad - w {
                    let mut s = bias.data()[f];
                    for off in 0..w {
                        for j in 0..d {
                            s += at(start + off, j) * weight.get2(off * d + j, f);
                        }
                    }
                    best = best.max(s.max(0.0));
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn cnn_matches_naive_convolution() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let widths = [3, 4, 5];
        let cnn = CnnEncoder::new(&mut store, "cnn", 5, &widths, 7, &mut r);
        for t in [1, 2, 5, 6, 9] {
            let x = random_matrix(&mut r, t, 5);
            let mut tape = Tape::new();
            let u = tape.constant(x.clone()).unwrap();
            let out = cnn.encode(&mut tape, &store, &[u]).unwrap();
            let expected = naive_cnn(&store, &x, &widths, 7);
            for (a, b) in tape.value(out).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "T={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cnn_batches_utterances_independently() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cnn = CnnEncoder::new(&mut store, "cnn", 3, &[3, 4, 5], 4, &mut r);
        let xs: Vec<Tensor> = [2, 7, 5].iter().map(|&t| random_matrix(&mut r, t, 3)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
        let all = cnn.encode(&mut tape, &store, &vars).unwrap();
        for (i, &v) in vars.iter().enumerate() {
            let single = cnn.encode(&mut tape, &store, &[v]).unwrap();
            assert_eq!(tape.value(all).row(i), tape.value(single).row(0));
        }
    }

    #[test]
    fn cnn_pooling_is_translation_invariant() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cnn = CnnEncoder::new(&mut store, "cnn", 3, &[3, 4, 5], 5, &mut r);
        let pattern = random_matrix(&mut r, 5, 3);
        let place = |offset: usize| {
            let mut data = vec![0.0; 20 * 3];
            data[offset * 3..offset * 3 + 15].copy_from_slice(pattern.data());
            Tensor::new(vec![20, 3], data).unwrap()
        };
        let mut tape = Tape::new();
        // At least four zero rows on each side: every window touching the
        // pattern exists at both offsets, the rest are all-zero windows.
        let a = tape.constant(place(4)).unwrap();
        let b = tape.constant(place(11)).unwrap();
        let out_a = cnn.encode(&mut tape, &store, &[a]).unwrap();
        let out_b = cnn.encode(&mut tape, &store, &[b]).unwrap();
        let (va, vb) = (tape.value(out_a).data().to_vec(), tape.value(out_b).data().to_vec());
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero() {
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "ctx", 4, 3, &mut rng());
        zero_all(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(&mut rng(), 5, 4)).unwrap();
        let seq = bi.encode_sequence(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(seq), &[5, 6]);
        assert!(tape.value(seq).data().iter().all(|&v| v == 0.0));
        let fin = bi.encode_final(&mut tape, &store, x).unwrap();
        assert!(tape.value(fin).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_uses_the_same_token_both_ways() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "utt", 3, 4, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(&mut r, 1, 3)).unwrap();
        let fin = bi.encode_final(&mut tape, &store, x).unwrap();
        let seq = bi.encode_sequence(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(fin).data(), tape.value(seq).data());
    }

    #[test]
    fn reversal_swaps_directions_when_weights_swap() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "utt", 3, 4, &mut r);
        let x = random_matrix(&mut r, 6, 3);
        let mut rev_rows: Vec<Vec<f64>> = (0..6).map(|i| x.row(i).to_vec()).collect();
        rev_rows.reverse();
        let xr = Tensor::from_rows(&rev_rows).unwrap();

        let mut swapped = store.clone();
        for part in ["wx", "wh", "b"] {
            let f = store.find(&format!("utt.fwd.{part}")).unwrap();
            let b = store.find(&format!("utt.bwd.{part}")).unwrap();
            *swapped.get_mut(f).tensor_mut() = store.tensor(b).clone();
            *swapped.get_mut(b).tensor_mut() = store.tensor(f).clone();
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let a = bi.encode_final(&mut tape, &store, xv).unwrap();
        let mut tape2 = Tape::new();
        let xrv = tape2.constant(xr).unwrap();
        let b = bi.encode_final(&mut tape2, &swapped, xrv).unwrap();
        let (a, b) = (tape.value(a).data(), tape2.value(b).data());
        assert_eq!(&a[..4], &b[4..]);
        assert_eq!(&a[4..], &b[..4]);
    }

    #[test]
    fn context_is_order_sensitive_unless_inputs_match() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "ctx", 3, 4, &mut r);
        let x = random_matrix(&mut r, 3, 3);
        let perm = Tensor::from_rows(&[x.row(2).to_vec(), x.row(0).to_vec(), x.row(1).to_vec()]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x).unwrap();
        let b = tape.constant(perm).unwrap();
        let ea = bi.encode_sequence(&mut tape, &store, a).unwrap();
        let eb = bi.encode_sequence(&mut tape, &store, b).unwrap();
        assert_ne!(tape.value(ea).row(0), tape.value(eb).row(1));

        let same = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9]; 3]).unwrap();
        let c = tape.constant(same).unwrap();
        let ec = bi.encode_sequence(&mut tape, &store, c).unwrap();
        let ec2 = bi.encode_sequence(&mut tape, &store, c).unwrap();
        assert_eq!(tape.value(ec).data(), tape.value(ec2).data());
    }

    #[test]
    fn masked_tail_does_not_leak() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "ctx", 3, 4, &mut r);
        let x = random_matrix(&mut r, 5, 3);
        let mut tape = Tape::new();
        let full = tape.constant(x.clone()).unwrap();
        let masked = bi
            .encode_context(&mut tape, &store, full, &[true, true, true, false, false])
            .unwrap();
        let prefix = tape.slice_rows(full, 0, 3).unwrap();
        let direct = bi.encode_sequence(&mut tape, &store, prefix).unwrap();
        assert_eq!(&tape.value(masked).data()[..24], tape.value(direct).data());
        assert!(tape.value(masked).data()[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_zero_and_eval_determinism() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", 6, 8, 8, 0.2, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(&mut r, 2, 6)).unwrap();
        let a = mlp.forward(&mut tape, &store, x, None).unwrap();
        let b = mlp.forward(&mut tape, &store, x, None).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());

        zero_all(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(&mut r, 2, 6)).unwrap();
        let z = mlp.forward(&mut tape, &store, x, Some(&mut r)).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }
}
