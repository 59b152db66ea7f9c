//! A small eager tape for reverse-mode differentiation.
//!
//! Each builder method computes its value immediately and records the node.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! the trainable parameter leaves in bind order. Shape errors inside the
//! graph are programmer errors and panic; caller-facing validation happens
//! in the public operations that build graphs.

use super::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    Upsample2,
    Dense,
    LeakyRelu(f64),
    Tanh,
    Abs,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ChannelAffine,
    Clamp(f64, f64),
    SumAll,
    MeanAll,
    Dot,
    L2Normalize,
    SoftmaxCrossEntropy { label: usize },
    GlobalAvgPool,
    Reshape,
}

struct Node {
    op: Op,
    ins: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<NodeId>,
}

/// Gradients for the trainable leaves, in the order they were bound.
pub struct Grads {
    pub by_param: Vec<Tensor>,
}

const NORM_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.scalar_value()
    }

    fn push(&mut self, op: Op, ins: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = ins.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            ins,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            ins: vec![],
            value,
            needs_grad: false,
        });
        self.nodes.len() - 1
    }

    /// Parameter leaf. If `trainable`, its gradient is reported by
    /// [`Graph::backward`] in bind order.
    pub fn param(&mut self, value: &Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            ins: vec![],
            value: value.clone(),
            needs_grad: trainable,
        });
        let id = self.nodes.len() - 1;
        if trainable {
            self.trainable.push(id);
        }
        id
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let value = conv2d_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
        );
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b], value)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, h, w) = xv.chw().expect("upsample2 needs a CHW tensor");
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = xv.data[(ci * h + hi) * w + wi];
                    for dh in 0..2 {
                        for dw in 0..2 {
                            out.data[(ci * 2 * h + 2 * hi + dh) * 2 * w + 2 * wi + dw] = v;
                        }
                    }
                }
            }
        }
        self.push(Op::Upsample2, vec![x], out)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        assert_eq!(wv.shape.len(), 2, "dense weight must be 2-d");
        let (m, n) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.numel(), n, "dense input width mismatch");
        assert_eq!(bv.numel(), m, "dense bias width mismatch");
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            let row = &wv.data[i * n..(i + 1) * n];
            let mut acc = bv.data[i];
            for (a, b) in row.iter().zip(&xv.data) {
                acc += a * b;
            }
            out.data[i] = acc;
        }
        self.push(Op::Dense, vec![x, w, b], out)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(Op::LeakyRelu(slope), vec![x], out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.push(Op::Tanh, vec![x], out)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in &mut out.data {
            *v = v.abs();
        }
        self.push(Op::Abs, vec![x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert!(av.same_shape(bv), "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert!(av.same_shape(bv), "sub shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert!(av.same_shape(bv), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in &mut out.data {
            *v *= c;
        }
        self.push(Op::Scale(c), vec![x], out)
    }

    /// `out[c,h,w] = gamma[c] * f[c,h,w] + beta[c]`, broadcast spatially.
    pub fn channel_affine(&mut self, f: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let fv = &self.nodes[f].value;
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let (c, h, w) = fv.chw().expect("channel_affine needs a CHW tensor");
        assert_eq!(gv.numel(), c, "gamma width mismatch");
        assert_eq!(bv.numel(), c, "beta width mismatch");
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let (g, bb) = (gv.data[ci], bv.data[ci]);
            let base = ci * h * w;
            for i in 0..h * w {
                out.data[base + i] = g * fv.data[base + i] + bb;
            }
        }
        self.push(Op::ChannelAffine, vec![f, gamma, beta], out)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in &mut out.data {
            *v = v.clamp(lo, hi);
        }
        self.push(Op::Clamp(lo, hi), vec![x], out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel() as f64;
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(Op::MeanAll, vec![x], Tensor::scalar(s / n))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.numel(), bv.numel(), "dot length mismatch");
        let s: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
        self.push(Op::Dot, vec![a, b], Tensor::scalar(s))
    }

    /// Normalize a vector to unit length. Uses a tiny epsilon floor so the
    /// graph stays finite; degenerate embeddings are rejected at the public
    /// API level before training ever sees them.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let norm = xv.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = norm.max(NORM_EPS);
        let data = xv.data.iter().map(|v| v / r).collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.push(Op::L2Normalize, vec![x], value)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let xv = &self.nodes[logits].value;
        assert!(label < xv.numel(), "label out of range");
        let max = xv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = xv.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = logsum - xv.data[label];
        self.push(
            Op::SoftmaxCrossEntropy { label },
            vec![logits],
            Tensor::scalar(loss),
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, h, w) = xv.chw().expect("global_avg_pool needs a CHW tensor");
        let mut out = Tensor::zeros(&[c]);
        for ci in 0..c {
            let base = ci * h * w;
            out.data[ci] = xv.data[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        self.push(Op::GlobalAvgPool, vec![x], out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(
            xv.numel(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let value = Tensor {
            shape: shape.to_vec(),
            data: xv.data.clone(),
        };
        self.push(Op::Reshape, vec![x], value)
    }

    /// Reverse-mode sweep from a scalar `loss` node. Returns gradients for
    /// all trainable parameter leaves in bind order (zeros if a parameter
    /// did not participate).
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.nodes[loss].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Conv2d { stride, pad } => {
                    self.backward_conv2d(node, &gy, stride, pad, &mut grads);
                }
                Op::Upsample2 => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let (c, h, w) = xv.chw().unwrap();
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let mut acc = 0.0;
                                for dh in 0..2 {
                                    for dw in 0..2 {
                                        acc += gy.data
                                            [(ci * 2 * h + 2 * hi + dh) * 2 * w + 2 * wi + dw];
                                    }
                                }
                                dx.data[(ci * h + hi) * w + wi] = acc;
                            }
                        }
                    }
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::Dense => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let wv = &self.nodes[node.ins[1]].value;
                    let (m, n) = (wv.shape[0], wv.shape[1]);
                    if self.nodes[node.ins[0]].needs_grad {
                        let mut dx = Tensor::zeros(&xv.shape);
                        for i in 0..m {
                            let gyi = gy.data[i];
                            let row = &wv.data[i * n..(i + 1) * n];
                            for (dxj, wij) in dx.data.iter_mut().zip(row) {
                                *dxj += gyi * wij;
                            }
                        }
                        self.accumulate(&mut grads, node.ins[0], dx);
                    }
                    if self.nodes[node.ins[1]].needs_grad {
                        let mut dw = Tensor::zeros(&wv.shape);
                        for i in 0..m {
                            let gyi = gy.data[i];
                            let row = &mut dw.data[i * n..(i + 1) * n];
                            for (dwij, xj) in row.iter_mut().zip(&xv.data) {
                                *dwij += gyi * xj;
                            }
                        }
                        self.accumulate(&mut grads, node.ins[1], dw);
                    }
                    if self.nodes[node.ins[2]].needs_grad {
                        let db = Tensor::from_vec(&[m], gy.data.clone()).unwrap();
                        self.accumulate(&mut grads, node.ins[2], db);
                    }
                }
                Op::LeakyRelu(slope) => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let data = xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&x, &g)| if x > 0.0 { g } else { g * slope })
                        .collect();
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data,
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::Tanh => {
                    let yv = &node.value;
                    let data = yv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&y, &g)| g * (1.0 - y * y))
                        .collect();
                    let dx = Tensor {
                        shape: yv.shape.clone(),
                        data,
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::Abs => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let data = xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&x, &g)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data,
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::Add => {
                    self.accumulate(&mut grads, node.ins[0], gy.clone());
                    self.accumulate(&mut grads, node.ins[1], gy);
                }
                Op::Sub => {
                    if self.nodes[node.ins[0]].needs_grad {
                        self.accumulate(&mut grads, node.ins[0], gy.clone());
                    }
                    if self.nodes[node.ins[1]].needs_grad {
                        let neg = Tensor {
                            shape: gy.shape.clone(),
                            data: gy.data.iter().map(|v| -v).collect(),
                        };
                        self.accumulate(&mut grads, node.ins[1], neg);
                    }
                }
                Op::Mul => {
                    let av = &self.nodes[node.ins[0]].value;
                    let bv = &self.nodes[node.ins[1]].value;
                    if self.nodes[node.ins[0]].needs_grad {
                        let da = Tensor {
                            shape: av.shape.clone(),
                            data: gy.data.iter().zip(&bv.data).map(|(g, b)| g * b).collect(),
                        };
                        self.accumulate(&mut grads, node.ins[0], da);
                    }
                    if self.nodes[node.ins[1]].needs_grad {
                        let db = Tensor {
                            shape: bv.shape.clone(),
                            data: gy.data.iter().zip(&av.data).map(|(g, a)| g * a).collect(),
                        };
                        self.accumulate(&mut grads, node.ins[1], db);
                    }
                }
                Op::Scale(c) => {
                    let dx = Tensor {
                        shape: gy.shape.clone(),
                        data: gy.data.iter().map(|v| v * c).collect(),
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::ChannelAffine => {
                    let fv = &self.nodes[node.ins[0]].value;
                    let gv = &self.nodes[node.ins[1]].value;
                    let (c, h, w) = fv.chw().unwrap();
                    if self.nodes[node.ins[0]].needs_grad {
                        let mut df = Tensor::zeros(&[c, h, w]);
                        for ci in 0..c {
                            let g = gv.data[ci];
                            let base = ci * h * w;
                            for i in 0..h * w {
                                df.data[base + i] = gy.data[base + i] * g;
                            }
                        }
                        self.accumulate(&mut grads, node.ins[0], df);
                    }
                    if self.nodes[node.ins[1]].needs_grad {
                        let mut dg = Tensor::zeros(&[c]);
                        for ci in 0..c {
                            let base = ci * h * w;
                            let mut acc = 0.0;
                            for i in 0..h * w {
                                acc += gy.data[base + i] * fv.data[base + i];
                            }
                            dg.data[ci] = acc;
                        }
                        self.accumulate(&mut grads, node.ins[1], dg);
                    }
                    if self.nodes[node.ins[2]].needs_grad {
                        let mut db = Tensor::zeros(&[c]);
                        for ci in 0..c {
                            let base = ci * h * w;
                            db.data[ci] = gy.data[base..base + h * w].iter().sum();
                        }
                        self.accumulate(&mut grads, node.ins[2], db);
                    }
                }
                Op::Clamp(lo, hi) => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let data = xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&x, &g)| if x > lo && x < hi { g } else { 0.0 })
                        .collect();
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data,
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::SumAll => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let g = gy.scalar_value();
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data: vec![g; xv.numel()],
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::MeanAll => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let g = gy.scalar_value() / xv.numel() as f64;
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data: vec![g; xv.numel()],
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::Dot => {
                    let av = &self.nodes[node.ins[0]].value;
                    let bv = &self.nodes[node.ins[1]].value;
                    let g = gy.scalar_value();
                    if self.nodes[node.ins[0]].needs_grad {
                        let da = Tensor {
                            shape: av.shape.clone(),
                            data: bv.data.iter().map(|v| g * v).collect(),
                        };
                        self.accumulate(&mut grads, node.ins[0], da);
                    }
                    if self.nodes[node.ins[1]].needs_grad {
                        let db = Tensor {
                            shape: bv.shape.clone(),
                            data: av.data.iter().map(|v| g * v).collect(),
                        };
                        self.accumulate(&mut grads, node.ins[1], db);
                    }
                }
                Op::L2Normalize => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let yv = &node.value;
                    let r = xv
                        .data
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                        .max(NORM_EPS);
                    let ydg: f64 = yv.data.iter().zip(&gy.data).map(|(y, g)| y * g).sum();
                    let data = gy
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(&g, &y)| (g - y * ydg) / r)
                        .collect();
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data,
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::SoftmaxCrossEntropy { label } => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let g = gy.scalar_value();
                    let max = xv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = xv.data.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let mut data: Vec<f64> = exps.iter().map(|e| g * e / sum).collect();
                    data[label] -= g;
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data,
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::GlobalAvgPool => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let (c, h, w) = xv.chw().unwrap();
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ci in 0..c {
                        let g = gy.data[ci] / (h * w) as f64;
                        let base = ci * h * w;
                        for i in 0..h * w {
                            dx.data[base + i] = g;
                        }
                    }
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
                Op::Reshape => {
                    let xv = &self.nodes[node.ins[0]].value;
                    let dx = Tensor {
                        shape: xv.shape.clone(),
                        data: gy.data.clone(),
                    };
                    self.accumulate(&mut grads, node.ins[0], dx);
                }
            }
        }

        let by_param = self
            .trainable
            .iter()
            .map(|&id| match grads[id].take() {
                Some(g) => g,
                None => Tensor::zeros(&self.nodes[id].value.shape),
            })
            .collect();
        Grads { by_param }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, v) in existing.data.iter_mut().zip(&g.data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_conv2d(
        &self,
        node: &Node,
        gy: &Tensor,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &self.nodes[node.ins[0]].value;
        let wv = &self.nodes[node.ins[1]].value;
        let (ci_n, h, w) = xv.chw().unwrap();
        let co_n = wv.shape[0];
        let k = wv.shape[2];
        let (ho_n, wo_n) = (node.value.shape[1], node.value.shape[2]);

        let need_x = self.nodes[node.ins[0]].needs_grad;
        let need_w = self.nodes[node.ins[1]].needs_grad;
        let need_b = self.nodes[node.ins[2]].needs_grad;

        let mut dx = if need_x {
            Some(Tensor::zeros(&[ci_n, h, w]))
        } else {
            None
        };
        let mut dw = if need_w {
            Some(Tensor::zeros(&wv.shape))
        } else {
            None
        };
        let mut db = if need_b {
            Some(Tensor::zeros(&[co_n]))
        } else {
            None
        };

        for co in 0..co_n {
            for ho in 0..ho_n {
                let hi0 = (ho * stride) as isize - pad as isize;
                for wo in 0..wo_n {
                    let wi0 = (wo * stride) as isize - pad as isize;
                    let g = gy.data[(co * ho_n + ho) * wo_n + wo];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(db) = db.as_mut() {
                        db.data[co] += g;
                    }
                    for ci in 0..ci_n {
                        for kh in 0..k {
                            let hi = hi0 + kh as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let xrow = (ci * h + hi as usize) * w;
                            let wrow = ((co * ci_n + ci) * k + kh) * k;
                            for kw in 0..k {
                                let wi = wi0 + kw as isize;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw.data[wrow + kw] += g * xv.data[xrow + wi as usize];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx.data[xrow + wi as usize] += g * wv.data[wrow + kw];
                                }
                            }
                        }
                    }
                }
            }
        }

        if let Some(dx) = dx {
            self.accumulate(grads, node.ins[0], dx);
        }
        if let Some(dw) = dw {
            self.accumulate(grads, node.ins[1], dw);
        }
        if let Some(db) = db {
            self.accumulate(grads, node.ins[2], db);
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci_n, h, wd) = x.chw().expect("conv2d input must be CHW");
    assert_eq!(w.shape.len(), 4, "conv2d weight must be 4-d");
    let (co_n, wci, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(wci, ci_n, "conv2d channel mismatch");
    assert_eq!(kh, kw, "conv2d kernels are square");
    assert_eq!(b.numel(), co_n, "conv2d bias width mismatch");
    let k = kh;
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than input");
    let ho_n = (h + 2 * pad - k) / stride + 1;
    let wo_n = (wd + 2 * pad - k) / stride + 1;

    let mut out = Tensor::zeros(&[co_n, ho_n, wo_n]);
    for co in 0..co_n {
        for ho in 0..ho_n {
            let hi0 = (ho * stride) as isize - pad as isize;
            for wo in 0..wo_n {
                let wi0 = (wo * stride) as isize - pad as isize;
                let mut acc = b.data[co];
                for ci in 0..ci_n {
                    for khi in 0..k {
                        let hi = hi0 + khi as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let kw_lo = (-wi0).max(0) as usize;
                        let kw_hi = (wd as isize - wi0).min(k as isize) as usize;
                        if kw_lo >= kw_hi {
                            continue;
                        }
                        let xbase = (ci * h + hi as usize) * wd + (wi0 + kw_lo as isize) as usize;
                        let wbase = ((co * ci_n + ci) * k + khi) * k + kw_lo;
                        let xrow = &x.data[xbase..xbase + (kw_hi - kw_lo)];
                        let wrow = &w.data[wbase..wbase + (kw_hi - kw_lo)];
                        for (xv, wv) in xrow.iter().zip(wrow) {
                            acc += xv * wv;
                        }
                    }
                }
                out.data[(co * ho_n + ho) * wo_n + wo] = acc;
            }
        }
    }
    out
}
