//! Neural building blocks: embeddings, the LSTM cell, the bidirectional
//! encoder, and the single-hidden-layer feedforward networks used by every
//! score function.
//!
//! Layers operate on tensors already recorded on a [`Graph`]; binding named
//! parameters into a graph is the model's job.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorId};

/// Glorot/Xavier uniform initialization: `U(-s, s)` with
/// `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-s..s)).with_requires_grad()
}

pub fn zero_bias(len: usize) -> Tensor {
    Tensor::zeros(&[len]).with_requires_grad()
}

/// `w·x (+ b)` for a matrix `w: [O×I]` and vector `x: [I]`.
pub(crate) fn affine(
    g: &mut Graph,
    w: TensorId,
    x: TensorId,
    b: Option<TensorId>,
) -> Result<TensorId> {
    let prod = g.matvec(w, x)?;
    match b {
        Some(b) => g.add(prod, b),
        None => Ok(prod),
    }
}

// ── embeddings ──────────────────────────────────────────────────────────

/// Looks up ids in an embedding table `[E×|V|]` whose columns are word
/// vectors. Row `t` of the result is column `ids[t]`.
pub fn embed(g: &mut Graph, table: TensorId, ids: &[usize]) -> Result<TensorId> {
    g.lookup(table, ids)
}

// ── LSTM ────────────────────────────────────────────────────────────────

/// One gate of an LSTM cell: `w_x: [H×I]`, `w_h: [H×H]`, `b: [H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmGateIds {
    pub w_x: TensorId,
    pub w_h: TensorId,
    pub b: TensorId,
}

/// Input, forget, output, and candidate gates; all share the hidden size.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellIds {
    pub input: LstmGateIds,
    pub forget: LstmGateIds,
    pub output: LstmGateIds,
    pub candidate: LstmGateIds,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: TensorId,
    pub c: TensorId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        LstmState {
            h: g.constant(Tensor::zeros(&[hidden])),
            c: g.constant(Tensor::zeros(&[hidden])),
        }
    }
}

fn gate_preactivation(
    g: &mut Graph,
    gate: &LstmGateIds,
    x: TensorId,
    h: TensorId,
) -> Result<TensorId> {
    let from_x = affine(g, gate.w_x, x, None)?;
    let from_h = affine(g, gate.w_h, h, None)?;
    let sum = g.add(from_x, from_h)?;
    g.add(sum, gate.b)
}

/// Standard LSTM recurrence: sigmoid gates, tanh candidate and output
/// squashing.
pub fn lstm_step(
    g: &mut Graph,
    cell: &LstmCellIds,
    x: TensorId,
    state: &LstmState,
) -> Result<LstmState> {
    let i_pre = gate_preactivation(g, &cell.input, x, state.h)?;
    let i = g.sigmoid(i_pre);
    let f_pre = gate_preactivation(g, &cell.forget, x, state.h)?;
    let f = g.sigmoid(f_pre);
    let o_pre = gate_preactivation(g, &cell.output, x, state.h)?;
    let o = g.sigmoid(o_pre);
    let cand_pre = gate_preactivation(g, &cell.candidate, x, state.h)?;
    let cand = g.tanh(cand_pre);

    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let c_squashed = g.tanh(c_next);
    let h_next = g.mul(o, c_squashed)?;
    Ok(LstmState {
        h: h_next,
        c: c_next,
    })
}

// ── bidirectional encoder ───────────────────────────────────────────────

/// Runs forward and reverse LSTMs over the embedded sequence `[T×E]` and
/// concatenates their states per position: `h_t = [fwd_t; bwd_t]`.
///
/// Both directions start from all-zero states unless explicit initial
/// states are supplied. The annotation dimension is `2 * hidden`.
pub fn bidirectional_encode(
    g: &mut Graph,
    fwd: &LstmCellIds,
    bwd: &LstmCellIds,
    embeddings: TensorId,
    initial: Option<(LstmState, LstmState)>,
) -> Result<TensorId> {
    let shape = g.value(embeddings).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dimension("bidirectional_encode", &shape, &[]));
    }
    let t_len = shape[0];
    if t_len == 0 {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    let hidden = g.value(fwd.input.b).numel();
    let (mut fwd_state, mut bwd_state) = match initial {
        Some(states) => states,
        None => (LstmState::zeros(g, hidden), LstmState::zeros(g, hidden)),
    };

    let mut fwd_h = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = g.row(embeddings, t)?;
        fwd_state = lstm_step(g, fwd, x_t, &fwd_state)?;
        fwd_h.push(fwd_state.h);
    }
    let mut bwd_h = vec![None; t_len];
    for t in (0..t_len).rev() {
        let x_t = g.row(embeddings, t)?;
        bwd_state = lstm_step(g, bwd, x_t, &bwd_state)?;
        bwd_h[t] = Some(bwd_state.h);
    }

    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let h_t = g.concat(&[fwd_h[t], bwd_h[t].expect("filled above")])?;
        rows.push(h_t);
    }
    g.stack_rows(&rows)
}

// ── feedforward ─────────────────────────────────────────────────────────

/// A fully connected network with a single tanh hidden layer and an affine
/// output: `w1: [H×I]`, `b1: [H]`, `w2: [O×H]`, `b2: [O]`.
#[derive(Debug, Clone, Copy)]
pub struct FfnnIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// `w2 · tanh(w1·x + b1) + b2`.
pub fn ffnn(g: &mut Graph, p: &FfnnIds, input: TensorId) -> Result<TensorId> {
    let pre = affine(g, p.w1, input, Some(p.b1))?;
    let hidden = g.tanh(pre);
    affine(g, p.w2, hidden, Some(p.b2))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::from_fn(&[n], |_| rng.random_range(-0.5..0.5))
    }

    pub(crate) fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[r, c], |_| rng.random_range(-0.5..0.5))
    }

    /// Value-level LSTM parameters for tests: gates in i, f, o, g order.
    pub(crate) struct LstmParams {
        pub gates: Vec<(Tensor, Tensor, Tensor)>,
    }

    impl LstmParams {
        pub fn random(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
            let gates = (0..4)
                .map(|_| {
                    (
                        random_mat(rng, hidden, input),
                        random_mat(rng, hidden, hidden),
                        random_vec(rng, hidden),
                    )
                })
                .collect();
            LstmParams { gates }
        }

        pub fn zeros(input: usize, hidden: usize) -> Self {
            let gates = (0..4)
                .map(|_| {
                    (
                        Tensor::zeros(&[hidden, input]),
                        Tensor::zeros(&[hidden, hidden]),
                        Tensor::zeros(&[hidden]),
                    )
                })
                .collect();
            LstmParams { gates }
        }

        pub fn bind(&self, g: &mut Graph) -> LstmCellIds {
            let mut ids = self.gates.iter().map(|(wx, wh, b)| LstmGateIds {
                w_x: g.constant(wx.clone()),
                w_h: g.constant(wh.clone()),
                b: g.constant(b.clone()),
            });
            LstmCellIds {
                input: ids.next().unwrap(),
                forget: ids.next().unwrap(),
                output: ids.next().unwrap(),
                candidate: ids.next().unwrap(),
            }
        }
    }

    #[test]
    fn embed_identity_table_is_one_hot() {
        let mut g = Graph::new();
        let table = g.constant(
            Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap(),
        );
        let emb = embed(&mut g, table, &[2]).unwrap();
        assert_eq!(g.value(emb).shape(), &[1, 3]);
        assert_eq!(g.value(emb).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn embed_repeated_id_gives_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let table = g.constant(random_mat(&mut rng, 4, 6));
        let emb = embed(&mut g, table, &[3, 3]).unwrap();
        let v = g.value(emb);
        assert_eq!(v.data()[..4], v.data()[4..]);
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            embed(&mut g, table, &[3]),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn embed_gradient_accumulates_per_occurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let table = random_mat(&mut rng, 3, 5);
            let err = grad_check(
                |g, t| {
                    let emb = embed(g, t, &[1, 1, 4])?;
                    Ok(g.sum(emb))
                },
                &table,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "embed grad error {err}");
        }
    }

    #[test]
    fn lstm_zero_params_zero_state_gives_zero_output() {
        let params = LstmParams::zeros(3, 4);
        let mut g = Graph::new();
        let cell = params.bind(&mut g);
        let x = g.constant(Tensor::vector(vec![0.7, -0.3, 0.1]));
        let state = LstmState::zeros(&mut g, 4);
        let next = lstm_step(&mut g, &cell, x, &state).unwrap();
        assert_eq!(g.value(next.h).data(), &[0.0; 4]);
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell() {
        // With the forget bias at +20 the gate saturates at 1, so
        // c' ≈ c + i ⊙ g. Evaluated numerically at tolerance 1e-6.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = LstmParams::random(&mut rng, 3, 4);
        params.gates[1].2 = Tensor::full(&[4], 20.0);

        let x = random_vec(&mut rng, 3);
        let h0 = random_vec(&mut rng, 4);
        let c0 = random_vec(&mut rng, 4);

        let mut g = Graph::new();
        let cell = params.bind(&mut g);
        let xid = g.constant(x.clone());
        let state = LstmState {
            h: g.constant(h0.clone()),
            c: g.constant(c0.clone()),
        };
        let next = lstm_step(&mut g, &cell, xid, &state).unwrap();
        let c_next = g.value(next.c).data().to_vec();

        // Closed-form limit, computed outside the graph.
        let preact = |gate: &(Tensor, Tensor, Tensor)| -> Vec<f64> {
            (0..4)
                .map(|r| {
                    let wx: f64 = (0..3).map(|c| gate.0.get(&[r, c]) * x.data()[c]).sum();
                    let wh: f64 = (0..4).map(|c| gate.1.get(&[r, c]) * h0.data()[c]).sum();
                    wx + wh + gate.2.data()[r]
                })
                .collect()
        };
        let i: Vec<f64> = preact(&params.gates[0])
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let cand: Vec<f64> = preact(&params.gates[3]).iter().map(|v| v.tanh()).collect();
        for k in 0..4 {
            let limit = c0.data()[k] + i[k] * cand[k];
            assert!(
                (c_next[k] - limit).abs() < 1e-6,
                "cell {k}: {} vs limit {limit}",
                c_next[k]
            );
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let params = LstmParams::random(&mut rng, 3, 4);
            let x = random_vec(&mut rng, 3);
            let h0 = random_vec(&mut rng, 4);
            let c0 = random_vec(&mut rng, 4);

            // Check against every gate's input weights plus the input vector.
            for target in 0..5 {
                let build = |g: &mut Graph, id: TensorId| -> Result<TensorId> {
                    let mut gates = Vec::new();
                    for (k, (wx, wh, b)) in params.gates.iter().enumerate() {
                        let w_x = if target == k {
                            id
                        } else {
                            g.constant(wx.clone())
                        };
                        gates.push(LstmGateIds {
                            w_x,
                            w_h: g.constant(wh.clone()),
                            b: g.constant(b.clone()),
                        });
                    }
                    let cell = LstmCellIds {
                        input: gates[0],
                        forget: gates[1],
                        output: gates[2],
                        candidate: gates[3],
                    };
                    let xid = if target == 4 { id } else { g.constant(x.clone()) };
                    let state = LstmState {
                        h: g.constant(h0.clone()),
                        c: g.constant(c0.clone()),
                    };
                    let next = lstm_step(g, &cell, xid, &state)?;
                    let hsum = g.sum(next.h);
                    let csum = g.sum(next.c);
                    g.add(hsum, csum)
                };
                let probe = if target == 4 {
                    x.clone()
                } else {
                    params.gates[target].0.clone()
                };
                let err = grad_check(build, &probe, 1e-5).unwrap();
                assert!(err < 1e-4, "lstm grad error {err} for tensor {target}");
            }
        }
    }

    #[test]
    fn encoder_single_step_base_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fwd = LstmParams::random(&mut rng, 3, 2);
        let bwd = LstmParams::random(&mut rng, 3, 2);
        let x = random_mat(&mut rng, 1, 3);

        let mut g = Graph::new();
        let fwd_ids = fwd.bind(&mut g);
        let bwd_ids = bwd.bind(&mut g);
        let emb = g.constant(x.clone());
        let annotations = bidirectional_encode(&mut g, &fwd_ids, &bwd_ids, emb, None).unwrap();
        assert_eq!(g.value(annotations).shape(), &[1, 4]);

        // Each half is one LSTM step from the zero state on x_1.
        let single = |params: &LstmParams| {
            let mut g2 = Graph::new();
            let cell = params.bind(&mut g2);
            let xid = g2.constant(Tensor::vector(x.data().to_vec()));
            let state = LstmState::zeros(&mut g2, 2);
            let next = lstm_step(&mut g2, &cell, xid, &state).unwrap();
            g2.value(next.h).data().to_vec()
        };
        let expected: Vec<f64> = single(&fwd).into_iter().chain(single(&bwd)).collect();
        assert_eq!(g.value(annotations).data(), &expected[..]);
    }

    #[test]
    fn encoder_reversal_swaps_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fwd = LstmParams::random(&mut rng, 3, 2);
        let bwd = LstmParams::random(&mut rng, 3, 2);
        let t_len = 5;
        let x = random_mat(&mut rng, t_len, 3);

        let encode = |a: &LstmParams, b: &LstmParams, emb: &Tensor| {
            let mut g = Graph::new();
            let a_ids = a.bind(&mut g);
            let b_ids = b.bind(&mut g);
            let eid = g.constant(emb.clone());
            let ann = bidirectional_encode(&mut g, &a_ids, &b_ids, eid, None).unwrap();
            g.value(ann).data().to_vec()
        };

        let straight = encode(&fwd, &bwd, &x);
        let mut reversed_rows = vec![0.0; t_len * 3];
        for t in 0..t_len {
            reversed_rows[t * 3..(t + 1) * 3]
                .copy_from_slice(&x.data()[(t_len - 1 - t) * 3..(t_len - t) * 3]);
        }
        let reversed = encode(&bwd, &fwd, &Tensor::new(reversed_rows, &[t_len, 3]).unwrap());

        // h'_{T-1-t} = [bwd half; fwd half] of h_t.
        for t in 0..t_len {
            let orig = &straight[t * 4..(t + 1) * 4];
            let swapped = &reversed[(t_len - 1 - t) * 4..(t_len - t) * 4];
            assert_eq!(&orig[..2], &swapped[2..], "fwd half at t={t}");
            assert_eq!(&orig[2..], &swapped[..2], "bwd half at t={t}");
        }
    }

    #[test]
    fn encoder_output_count_matches_length_up_to_fifty() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fwd = LstmParams::random(&mut rng, 2, 2);
        let bwd = LstmParams::random(&mut rng, 2, 2);
        for t_len in 1..=50 {
            let mut g = Graph::new();
            let fwd_ids = fwd.bind(&mut g);
            let bwd_ids = bwd.bind(&mut g);
            let emb = g.constant(random_mat(&mut rng, t_len, 2));
            let ann = bidirectional_encode(&mut g, &fwd_ids, &bwd_ids, emb, None).unwrap();
            assert_eq!(g.value(ann).shape(), &[t_len, 4]);
        }
    }

    #[test]
    fn encoder_rejects_empty_sequence() {
        // An empty sequence cannot even be represented as a tensor; the
        // contract error surfaces at construction.
        assert!(Tensor::new(vec![], &[0, 3]).is_err());
    }

    #[test]
    fn ffnn_zero_weights_output_equals_bias() {
        let mut g = Graph::new();
        let p = FfnnIds {
            w1: g.constant(Tensor::zeros(&[4, 3])),
            b1: g.constant(Tensor::zeros(&[4])),
            w2: g.constant(Tensor::zeros(&[2, 4])),
            b2: g.constant(Tensor::vector(vec![0.25, -1.5])),
        };
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let out = ffnn(&mut g, &p, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.25, -1.5]);
    }

    #[test]
    fn ffnn_output_width_follows_w2() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for out_dim in [1usize, 6] {
            let mut g = Graph::new();
            let p = FfnnIds {
                w1: g.constant(random_mat(&mut rng, 5, 3)),
                b1: g.constant(random_vec(&mut rng, 5)),
                w2: g.constant(random_mat(&mut rng, out_dim, 5)),
                b2: g.constant(random_vec(&mut rng, out_dim)),
            };
            let x = g.constant(random_vec(&mut rng, 3));
            let out = ffnn(&mut g, &p, x).unwrap();
            assert_eq!(g.value(out).shape(), &[out_dim]);
        }
    }

    #[test]
    fn ffnn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let w1 = random_mat(&mut rng, 4, 3);
            let b1 = random_vec(&mut rng, 4);
            let w2 = random_mat(&mut rng, 2, 4);
            let b2 = random_vec(&mut rng, 2);
            let x = random_vec(&mut rng, 3);
            let err = grad_check(
                |g, id| {
                    let p = FfnnIds {
                        w1: id,
                        b1: g.constant(b1.clone()),
                        w2: g.constant(w2.clone()),
                        b2: g.constant(b2.clone()),
                    };
                    let xid = g.constant(x.clone());
                    let out = ffnn(g, &p, xid)?;
                    Ok(g.sum(out))
                },
                &w1,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "ffnn grad error {err}");
        }
    }

    #[test]
    fn glorot_scale_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = glorot_uniform(&mut rng, 10, 30);
        let s = (6.0 / 40.0_f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < s));
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let w2 = glorot_uniform(&mut rng2, 10, 30);
        assert_eq!(w.data(), w2.data());
    }
}
