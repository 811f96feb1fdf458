//! Finite-difference gradient cases shared by the core property tests and
//! the acceptance run. Each case draws its inputs from a seed, keeping them
//! away from the kinks of piecewise-linear ops.

use pmdef_core::gradcheck::grad_check;
use pmdef_core::tape::Padding;
use pmdef_core::{Result, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Small deterministic generator (splitmix64) so the cases need no RNG crate.
pub struct Gen(u64);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(seed ^ 0x5EED_CA5E_0000_0001)
    }

    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Values with magnitude in `[0.05, 1]` and random sign.
    pub fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.uniform(0.05, 1.0);
                if self.next() & 1 == 0 {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Distinct values spaced at least `0.02` apart, shuffled.
    pub fn spaced(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64 + self.uniform(0.0, 0.03)).collect();
        for i in (1..n).rev() {
            let j = (self.next() % (i as u64 + 1)) as usize;
            v.swap(i, j);
        }
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    /// Random distributions, one per row.
    pub fn distribution(&mut self, rows: usize, k: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..k).map(|_| self.uniform(0.05, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        Tensor::new(vec![rows, k], data).unwrap()
    }
}

/// Random-weighted sum, so no gradient component cancels by symmetry.
fn wsum(tape: &mut Tape, v: Var, g: &Tensor) -> Result<Var> {
    let c = tape.constant(g.clone());
    let p = tape.mul(v, c)?;
    tape.sum(p)
}

fn check(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    grad_check(f, x, STEP)
}

/// Tiny MLP logits `relu(x W1 + b1) W2 + b2` with constant weights.
fn mlp(tape: &mut Tape, x: Var, w: &[Tensor; 4]) -> Result<Var> {
    let w1 = tape.constant(w[0].clone());
    let b1 = tape.constant(w[1].clone());
    let w2 = tape.constant(w[2].clone());
    let b2 = tape.constant(w[3].clone());
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.tanh(h)?;
    let z = tape.matmul(h, w2)?;
    tape.add_bias(z, b2)
}

fn mlp_weights(g: &mut Gen, d: usize, h: usize, k: usize) -> [Tensor; 4] {
    [
        g.tensor(&[d, h], -1.0, 1.0),
        g.tensor(&[h], -0.5, 0.5),
        g.tensor(&[h, k], -1.0, 1.0),
        g.tensor(&[k], -0.5, 0.5),
    ]
}

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            run: |s| {
                let mut g = Gen::new(s);
                let b = g.tensor(&[4, 3], -1.0, 1.0);
                let wt = g.tensor(&[2, 3], -1.0, 1.0);
                let x = g.tensor(&[2, 4], -1.0, 1.0);
                check(&x, |t, x| {
                    let bv = t.constant(b.clone());
                    let y = t.matmul(x, bv)?;
                    wsum(t, y, &wt)
                })?;
                // Right operand as the variable.
                let a = g.tensor(&[2, 4], -1.0, 1.0);
                let x = g.tensor(&[4, 3], -1.0, 1.0);
                check(&x, |t, x| {
                    let av = t.constant(a.clone());
                    let y = t.matmul(av, x)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "add_bias",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[3, 4], -1.0, 1.0);
                let b = g.tensor(&[4], -1.0, 1.0);
                let wt = g.tensor(&[3, 4], -1.0, 1.0);
                let e1 = check(&x, |t, x| {
                    let bv = t.constant(b.clone());
                    let y = t.add_bias(x, bv)?;
                    let y = t.mul(y, y)?;
                    wsum(t, y, &wt)
                })?;
                let e2 = check(&b, |t, b| {
                    let xv = t.constant(x.clone());
                    let y = t.add_bias(xv, b)?;
                    let y = t.mul(y, y)?;
                    wsum(t, y, &wt)
                })?;
                Ok(e1.max(e2))
            },
        },
        Case {
            name: "add_sub_mul",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[2, 5], -1.0, 1.0);
                let c = g.tensor(&[2, 5], -1.0, 1.0);
                let wt = g.tensor(&[2, 5], -1.0, 1.0);
                check(&x, |t, x| {
                    let cv = t.constant(c.clone());
                    let a = t.add(x, cv)?;
                    let b = t.sub(cv, x)?;
                    let m = t.mul(a, b)?;
                    let m = t.mul(m, x)?;
                    wsum(t, m, &wt)
                })
            },
        },
        Case {
            name: "scale_add_scalar",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[6], -1.0, 1.0);
                let wt = g.tensor(&[6], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.scale(x, -1.7)?;
                    let y = t.add_scalar(y, 0.3)?;
                    let y = t.mul(y, y)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "relu",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.away_from_zero(&[3, 5]);
                let wt = g.tensor(&[3, 5], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.relu(x)?;
                    let y = t.mul(y, y)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "sigmoid",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[3, 4], -3.0, 3.0);
                let wt = g.tensor(&[3, 4], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.sigmoid(x)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "tanh",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[3, 4], -2.0, 2.0);
                let wt = g.tensor(&[3, 4], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.tanh(x)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "clamp",
            run: |s| {
                let mut g = Gen::new(s);
                // Keep clear of the bounds at +-0.5.
                let mut x = g.away_from_zero(&[12]);
                x.data_mut().iter_mut().for_each(|v| {
                    if (v.abs() - 0.5).abs() < 0.02 {
                        *v *= 1.1;
                    }
                });
                let wt = g.tensor(&[12], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.clamp(x, -0.5, 0.5)?;
                    let y = t.mul(y, y)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "reshape_flatten",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[2, 2, 3, 1], -1.0, 1.0);
                let wt = g.tensor(&[2, 6], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.reshape(x, &[2, 3, 2])?;
                    let y = t.flatten(y)?;
                    let y = t.mul(y, y)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "conv2d",
            run: |s| {
                let mut g = Gen::new(s);
                let mut worst: f64 = 0.0;
                for (pad, stride, out) in [(Padding::Valid, 1, [1, 4, 4, 3]), (Padding::Same, 2, [1, 3, 3, 3])] {
                    let x = g.tensor(&[1, 5, 5, 2], -1.0, 1.0);
                    let w = g.tensor(&[2, 2, 2, 3], -1.0, 1.0);
                    let wt = g.tensor(&out, -1.0, 1.0);
                    worst = worst.max(check(&x, |t, x| {
                        let wv = t.constant(w.clone());
                        let y = t.conv2d(x, wv, stride, pad)?;
                        wsum(t, y, &wt)
                    })?);
                    worst = worst.max(check(&w, |t, w| {
                        let xv = t.constant(x.clone());
                        let y = t.conv2d(xv, w, stride, pad)?;
                        wsum(t, y, &wt)
                    })?);
                }
                Ok(worst)
            },
        },
        Case {
            name: "maxpool2d",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.spaced(&[1, 4, 4, 2]);
                let wt = g.tensor(&[1, 2, 2, 2], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.maxpool2d(x, 2, 2)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "softmax",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[2, 3, 4], -2.0, 2.0);
                let wt = g.tensor(&[2, 3, 4], -1.0, 1.0);
                let e1 = check(&x, |t, x| {
                    let y = t.softmax(x, 1)?;
                    wsum(t, y, &wt)
                })?;
                let e2 = check(&x, |t, x| {
                    let y = t.softmax_last(x)?;
                    wsum(t, y, &wt)
                })?;
                Ok(e1.max(e2))
            },
        },
        Case {
            name: "standardize",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[2, 3, 3, 1], 0.0, 1.0);
                let wt = g.tensor(&[2, 3, 3, 1], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.standardize(x)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "cross_entropy",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[3, 4], -2.0, 2.0);
                check(&x, |t, x| t.cross_entropy(x, &[0, 3, 1]))
            },
        },
        Case {
            name: "kl_divergence",
            run: |s| {
                let mut g = Gen::new(s);
                let p = g.distribution(3, 4);
                let zq = g.tensor(&[3, 4], -2.0, 2.0);
                let zp = g.tensor(&[3, 4], -2.0, 2.0);
                let q = g.distribution(3, 4);
                // Through softmax so perturbations stay on the simplex.
                let e1 = check(&zq, |t, z| {
                    let pv = t.constant(p.clone());
                    let qv = t.softmax_last(z)?;
                    t.kl_divergence(pv, qv)
                })?;
                let e2 = check(&zp, |t, z| {
                    let pv = t.softmax_last(z)?;
                    let qv = t.constant(q.clone());
                    t.kl_divergence(pv, qv)
                })?;
                Ok(e1.max(e2))
            },
        },
        Case {
            name: "sum_mean",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[2, 3], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.mul(x, x)?;
                    let a = t.sum(y)?;
                    let b = t.mean(x)?;
                    let b = t.mul(b, b)?;
                    t.add(a, b)
                })
            },
        },
        Case {
            name: "row_l2_norm",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.away_from_zero(&[3, 4]);
                let wt = g.tensor(&[3], -1.0, 1.0);
                check(&x, |t, x| {
                    let y = t.row_l2_norm(x)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "logit_margin",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.spaced(&[3, 5]);
                let wt = g.tensor(&[3], 0.5, 1.5);
                check(&x, |t, x| {
                    let y = t.logit_margin(x, &[0, 2, 4], 0.0)?;
                    wsum(t, y, &wt)
                })
            },
        },
        Case {
            name: "kl_softmax_conv2d",
            run: |s| {
                let mut g = Gen::new(s);
                let x = g.tensor(&[2, 4, 4, 1], 0.0, 1.0);
                let w = g.tensor(&[3, 3, 1, 2], -1.0, 1.0);
                let p = g.distribution(2, 8);
                check(&x, |t, x| {
                    let wv = t.constant(w.clone());
                    let y = t.conv2d(x, wv, 1, Padding::Valid)?;
                    let y = t.flatten(y)?;
                    let q = t.softmax_last(y)?;
                    let pv = t.constant(p.clone());
                    t.kl_divergence(pv, q)
                })
            },
        },
        Case {
            name: "fgsm_loss",
            run: |s| {
                let mut g = Gen::new(s);
                let w = mlp_weights(&mut g, 6, 5, 3);
                let x = g.tensor(&[3, 6], 0.0, 1.0);
                check(&x, |t, x| {
                    let z = mlp(t, x, &w)?;
                    t.cross_entropy(z, &[2, 0, 1])
                })
            },
        },
        Case {
            name: "prediction_matching_loss",
            run: |s| {
                // d/dW1 of KL(M(x) || M(AE(x))) with AE = sigmoid(relu(x W1 + b1) W2 + b2).
                let mut g = Gen::new(s);
                let clf = mlp_weights(&mut g, 6, 5, 3);
                let x = g.tensor(&[3, 6], 0.0, 1.0);
                let b1 = g.tensor(&[4], 0.1, 0.5);
                let w2 = g.tensor(&[4, 6], -1.0, 1.0);
                let b2 = g.tensor(&[6], -0.5, 0.5);
                let w1 = g.tensor(&[6, 4], 0.05, 1.0);
                check(&w1, |t, w1| {
                    let xv = t.constant(x.clone());
                    let zx = mlp(t, xv, &clf)?;
                    let p = t.softmax_last(zx)?;
                    let p = t.constant(t.value(p).clone());
                    let b1v = t.constant(b1.clone());
                    let w2v = t.constant(w2.clone());
                    let b2v = t.constant(b2.clone());
                    let h = t.matmul(xv, w1)?;
                    let h = t.add_bias(h, b1v)?;
                    let h = t.relu(h)?;
                    let r = t.matmul(h, w2v)?;
                    let r = t.add_bias(r, b2v)?;
                    let r = t.sigmoid(r)?;
                    let zr = mlp(t, r, &clf)?;
                    let q = t.softmax_last(zr)?;
                    t.kl_divergence(p, q)
                })
            },
        },
        Case {
            name: "hidden_layer_loss",
            run: |s| {
                // Combined objective with the probe weights as the variable; they
                // appear on both sides of the second KL term.
                let mut g = Gen::new(s);
                let clf = mlp_weights(&mut g, 5, 4, 3);
                let x = g.tensor(&[2, 5], 0.0, 1.0);
                let ae = g.tensor(&[5, 5], -0.6, 0.6);
                let wpsi = g.tensor(&[5, 4], -1.0, 1.0);
                check(&wpsi, |t, wpsi| {
                    let xv = t.constant(x.clone());
                    let av = t.constant(ae.clone());
                    let r = t.matmul(xv, av)?;
                    let r = t.sigmoid(r)?;
                    let zx = mlp(t, xv, &clf)?;
                    let p = t.softmax_last(zx)?;
                    let p = t.constant(t.value(p).clone());
                    let zr = mlp(t, r, &clf)?;
                    let q = t.softmax_last(zr)?;
                    let main = t.kl_divergence(p, q)?;
                    let yx = t.matmul(xv, wpsi)?;
                    let yx = t.softmax_last(yx)?;
                    let yr = t.matmul(r, wpsi)?;
                    let yr = t.softmax_last(yr)?;
                    let hidden = t.kl_divergence(yx, yr)?;
                    let hidden = t.scale(hidden, 0.7)?;
                    t.add(main, hidden)
                })
            },
        },
        Case {
            name: "cw_objective",
            run: |s| {
                let mut g = Gen::new(s);
                let labels = [0usize, 2];
                // Redraw until the margin is clear of its kinks.
                let (clf, x, w) = loop {
                    let clf = mlp_weights(&mut g, 4, 6, 3);
                    let x = g.tensor(&[2, 4], 0.05, 0.95);
                    let w = g.tensor(&[2, 4], -1.5, 1.5);
                    let mut t0 = Tape::new();
                    let xa = t0.constant(w.map(|v| (v.tanh() + 1.0) / 2.0));
                    let z = mlp(&mut t0, xa, &clf)?;
                    let zv = t0.value(z).clone();
                    let clear = labels.iter().enumerate().all(|(i, &y)| {
                        let row = zv.item(i);
                        let mut others: Vec<f64> = (0..3).filter(|&j| j != y).map(|j| row[j]).collect();
                        others.sort_by(f64::total_cmp);
                        (others[1] - others[0]).abs() > 1e-3 && (row[y] - others[1]).abs() > 1e-3
                    });
                    if clear {
                        break (clf, x, w);
                    }
                };
                check(&w, |t, w| {
                    let th = t.tanh(w)?;
                    let th = t.add_scalar(th, 1.0)?;
                    let xa = t.scale(th, 0.5)?;
                    let xc = t.constant(x.clone());
                    let d = t.sub(xa, xc)?;
                    let l2 = t.row_l2_norm(d)?;
                    let z = mlp(t, xa, &clf)?;
                    let f = t.logit_margin(z, &labels, 0.0)?;
                    let f = t.scale(f, 3.0)?;
                    let per = t.add(l2, f)?;
                    t.sum(per)
                })
            },
        },
    ]
}
