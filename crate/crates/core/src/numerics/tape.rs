//! Recording backend and reverse-mode gradient propagation.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::*;
use super::attention::{attention_backward, attention_forward, AttentionSpec};
use super::backend::*;
use super::conv::*;
use super::linalg::{linear_backward, linear_forward};
use super::norm::*;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{PdsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Const,
    Add(usize, usize),
    Scale(usize, f64),
    ScalarMul {
        w: usize,
        x: usize,
    },
    AddConst(usize),
    MulConst {
        x: usize,
        c: Tensor,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
    },
    LayerNorm {
        x: usize,
        g: usize,
        b: usize,
        cache: NormCache,
    },
    BatchNorm {
        x: usize,
        g: usize,
        b: usize,
        cache: BatchNormCache,
    },
    Relu(usize),
    Swish(usize),
    Glu(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttentionSpec,
        probs: Tensor,
    },
    MaskTime {
        x: usize,
        lengths: Vec<usize>,
    },
    PadTime {
        x: usize,
        len: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        lengths: Vec<usize>,
        count: usize,
    },
    DotConst {
        x: usize,
        c: Tensor,
    },
}

struct Node {
    /// `None` for parameters, which are read from the store.
    value: Option<Tensor>,
    op: Op,
}

/// Backend that records every operation so gradients can be propagated back
/// from a scalar loss.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
    mode: StatsMode,
    rng: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for t in self.params.values_mut().chain(self.leaves.values_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl<'p> Tape<'p> {
    /// Tape in training mode (batch statistics) without dropout.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_mode(store, StatsMode::Train, None)
    }

    pub fn with_mode(store: &'p ParamStore, mode: StatsMode, dropout_seed: Option<u64>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            mode,
            rng: dropout_seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    /// An input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, t: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(t), op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        match (&self.nodes[i].value, &self.nodes[i].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    /// Propagates gradients from a one-element `loss` back to every parameter and leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss.0);
        if lv.len() != 1 {
            return Err(PdsError::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(PdsError::Numerical(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let mut send = |idx: usize, t: Tensor| accumulate(&mut grads[idx], t);
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Scale(x, f) => send(*x, scale_tensor(&g, *f)),
                Op::ScalarMul { w, x } => {
                    let xv = self.val(*x);
                    let dw = dot_const_value(&g, xv)?;
                    let wv = self.val(*w).item();
                    send(*w, Tensor::new(self.val(*w).shape().to_vec(), vec![dw])?);
                    send(*x, scale_tensor(&g, wv));
                }
                Op::AddConst(x) => send(*x, g),
                Op::MulConst { x, c } => send(*x, mul_const_tensor(&g, c)?),
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(self.val(*x), self.val(*w), b.is_some(), &g);
                    send(*x, dx);
                    send(*w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        send(*b, db);
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = conv1d_backward(
                        self.val(*x),
                        self.val(*w),
                        self.val(*b),
                        *stride,
                        *pad,
                        &g,
                    )?;
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::Depthwise { x, w, b, pad } => {
                    let (dx, dw, db) = depthwise_conv1d_backward(
                        self.val(*x),
                        self.val(*w),
                        self.val(*b),
                        *pad,
                        &g,
                    )?;
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::LayerNorm {
                    x,
                    g: gain,
                    b,
                    cache,
                } => {
                    let (dx, dg, db) = layer_norm_backward(self.val(*gain), cache, &g);
                    send(*x, dx);
                    send(*gain, dg);
                    send(*b, db);
                }
                Op::BatchNorm {
                    x,
                    g: gain,
                    b,
                    cache,
                } => {
                    let (dx, dg, db) = batch_norm_backward(self.val(*gain), cache, &g);
                    send(*x, dx);
                    send(*gain, dg);
                    send(*b, db);
                }
                Op::Relu(x) => send(*x, relu_backward(self.val(*x), &g)),
                Op::Swish(x) => send(*x, swish_backward(self.val(*x), &g)),
                Op::Glu(x) => send(*x, glu_backward(self.val(*x), &g)?),
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.val(*q),
                        self.val(*k),
                        self.val(*v),
                        spec,
                        probs,
                        &g,
                    )?;
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::MaskTime { x, lengths } => send(*x, mask_time_tensor(&g, lengths)?),
                Op::PadTime { x, len } => send(*x, truncate_time_tensor(&g, *len)),
                Op::Embedding { table, ids } => {
                    let tv = self.val(*table);
                    let width = tv.dim(1);
                    let mut dt = Tensor::zeros(tv.shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * width..(r + 1) * width];
                        for (d, s) in dt.data_mut()[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(src)
                        {
                            *d += s;
                        }
                    }
                    send(*table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    lengths,
                    count,
                } => {
                    let lv = self.val(*logits);
                    let (_, t, v) = lv.btc()?;
                    let scale = g.item() / *count as f64;
                    let mut d = vec![0.0; lv.len()];
                    for (item, &len) in lengths.iter().enumerate() {
                        for ti in 0..len {
                            let r = item * t + ti;
                            for j in 0..v {
                                d[r * v + j] = probs[r * v + j] * scale;
                            }
                            d[r * v + targets[r]] -= scale;
                        }
                    }
                    send(*logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
                Op::DotConst { x, c } => send(*x, scale_tensor(c, g.item())),
            }
        }
        Ok(out)
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => add_into(acc, &g),
        None => *slot = Some(g),
    }
}

impl<'p> Backend<'p> for Tape<'p> {
    type V = Var;

    fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn mode(&self) -> StatsMode {
        self.mode
    }

    fn dropout_rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&i) = self.param_nodes.get(&id) {
            return Var(i);
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert(id, i);
        Var(i)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(v.0)
    }

    fn add(&mut self, a: Var, b: &Var) -> Result<Var> {
        let t = add_tensors(self.val(a.0), self.val(b.0))?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = scale_tensor(self.val(x.0), factor);
        self.push(t, Op::Scale(x.0, factor))
    }

    fn scalar_mul(&mut self, w: &Var, x: &Var) -> Result<Var> {
        let t = scalar_mul_tensor(self.val(w.0), self.val(x.0))?;
        Ok(self.push(t, Op::ScalarMul { w: w.0, x: x.0 }))
    }

    fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = add_const_tensor(self.val(x.0).clone(), c)?;
        Ok(self.push(t, Op::AddConst(x.0)))
    }

    fn mul_const(&mut self, x: &Var, c: Tensor) -> Result<Var> {
        let t = mul_const_tensor(self.val(x.0), &c)?;
        Ok(self.push(t, Op::MulConst { x: x.0, c }))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let t = linear_forward(self.val(x.0), self.val(w.0), b.map(|b| self.val(b.0)))?;
        Ok(self.push(
            t,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
        ))
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let t = conv1d_forward(self.val(x.0), self.val(w.0), self.val(b.0), stride, pad)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        ))
    }

    fn depthwise_conv1d(&mut self, x: &Var, w: &Var, b: &Var, pad: usize) -> Result<Var> {
        let t = depthwise_conv1d_forward(self.val(x.0), self.val(w.0), self.val(b.0), pad)?;
        Ok(self.push(
            t,
            Op::Depthwise {
                x: x.0,
                w: w.0,
                b: b.0,
                pad,
            },
        ))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (t, cache) =
            layer_norm_forward(self.val(x.0), self.val(gain.0), self.val(bias.0), eps)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                g: gain.0,
                b: bias.0,
                cache,
            },
        ))
    }

    fn batch_norm(
        &mut self,
        x: &Var,
        gain: &Var,
        bias: &Var,
        lengths: &[usize],
        running: &RunningStats,
        eps: f64,
    ) -> Result<Var> {
        let (t, cache) = batch_norm_forward(
            self.val(x.0),
            self.val(gain.0),
            self.val(bias.0),
            lengths,
            self.mode,
            running,
            eps,
        )?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x: x.0,
                g: gain.0,
                b: bias.0,
                cache,
            },
        ))
    }

    fn relu(&mut self, x: Var) -> Var {
        let t = relu_forward(self.val(x.0));
        self.push(t, Op::Relu(x.0))
    }

    fn swish(&mut self, x: Var) -> Var {
        let t = swish_forward(self.val(x.0));
        self.push(t, Op::Swish(x.0))
    }

    fn glu(&mut self, x: &Var) -> Result<Var> {
        let t = glu_forward(self.val(x.0))?;
        Ok(self.push(t, Op::Glu(x.0)))
    }

    fn attention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        spec: &AttentionSpec,
    ) -> Result<(Var, Option<Tensor>)> {
        let out = attention_forward(self.val(q.0), self.val(k.0), self.val(v.0), spec, true)?;
        let probs = out.probs.expect("probabilities stored for backward");
        let weights = spec.keep_weights.then(|| probs.clone());
        let var = self.push(
            out.out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec: spec.clone(),
                probs,
            },
        );
        Ok((var, weights))
    }

    fn mask_time(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let t = mask_time_tensor(self.val(x.0), lengths)?;
        Ok(self.push(
            t,
            Op::MaskTime {
                x: x.0,
                lengths: lengths.to_vec(),
            },
        ))
    }

    fn pad_time(&mut self, x: &Var, new_len: usize) -> Result<Var> {
        let old = self.val(x.0).btc()?.1;
        let t = pad_time_tensor(self.val(x.0), new_len)?;
        Ok(self.push(t, Op::PadTime { x: x.0, len: old }))
    }

    fn embedding(&mut self, table: &Var, ids: &[usize], batch: usize, time: usize) -> Result<Var> {
        let t = embedding_tensor(self.val(table.0), ids, batch, time)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize], lengths: &[usize]) -> Result<Var> {
        let (loss, probs, count) = cross_entropy_tensor(self.val(logits.0), targets, lengths)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                lengths: lengths.to_vec(),
                count,
            },
        ))
    }

    fn dot_const(&mut self, x: &Var, c: &Tensor) -> Result<Var> {
        let v = dot_const_value(self.val(x.0), c)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::DotConst {
                x: x.0,
                c: c.clone(),
            },
        ))
    }
}
