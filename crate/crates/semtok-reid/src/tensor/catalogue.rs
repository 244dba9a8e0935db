//! Enumerable catalogue of the differentiable primitives.
//!
//! Every primitive with a registered backward rule appears here exactly
//! once, with a generator producing random instances for the gradient-check
//! sweep. `detach` is deliberately absent: it is a graph-control operation
//! whose gradient is zero by definition, not a differentiable primitive.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::Tensor;
use crate::error::Result;

type CaseFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

pub struct CaseInstance {
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

pub struct PrimitiveCase {
    pub name: &'static str,
    ordinal: usize,
    gen: fn(&mut ChaCha12Rng) -> CaseInstance,
}

impl PrimitiveCase {
    pub fn ordinal(&self) -> usize {
        self.ordinal
    }

    pub fn instantiate(&self, rng: &mut ChaCha12Rng) -> CaseInstance {
        (self.gen)(rng)
    }
}

fn vals(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dim(rng: &mut ChaCha12Rng) -> usize {
    rng.gen_range(2..=5)
}

fn param(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::param(vals(rng, shape.iter().product(), lo, hi), shape).unwrap()
}

/// Random constant weights turning a tensor-valued op into a scalar
/// objective with informative gradients.
fn weigh(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    Tensor::constant(vals(rng, shape.iter().product(), -1.0, 1.0), shape).unwrap()
}

macro_rules! unary_case {
    ($rng:ident, $lo:expr, $hi:expr, $method:ident) => {{
        let shape = [dim($rng), dim($rng)];
        let x = param($rng, &shape, $lo, $hi);
        let w = weigh($rng, &shape);
        CaseInstance {
            inputs: vec![x],
            f: Box::new(move |t| t[0].$method()?.mul(&w)?.sum_all()),
        }
    }};
}

pub fn primitive_catalogue() -> Vec<PrimitiveCase> {
    let gens: Vec<(&'static str, fn(&mut ChaCha12Rng) -> CaseInstance)> = vec![
        ("matmul", |rng| {
            let (m, k, p) = (dim(rng), dim(rng), dim(rng));
            let a = param(rng, &[m, k], -1.0, 1.0);
            let b = param(rng, &[k, p], -1.0, 1.0);
            let w = weigh(rng, &[m, p]);
            CaseInstance {
                inputs: vec![a, b],
                f: Box::new(move |t| t[0].matmul(&t[1])?.mul(&w)?.sum_all()),
            }
        }),
        ("add", |rng| {
            let shape = [dim(rng), dim(rng)];
            let a = param(rng, &shape, -1.0, 1.0);
            // broadcast the second operand half of the time
            let b = if rng.gen_bool(0.5) {
                param(rng, &shape, -1.0, 1.0)
            } else {
                param(rng, &[shape[1]], -1.0, 1.0)
            };
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![a, b],
                f: Box::new(move |t| t[0].add(&t[1])?.mul(&w)?.sum_all()),
            }
        }),
        ("sub", |rng| {
            let shape = [dim(rng), dim(rng)];
            let a = param(rng, &shape, -1.0, 1.0);
            let b = if rng.gen_bool(0.5) {
                param(rng, &shape, -1.0, 1.0)
            } else {
                param(rng, &[shape[1]], -1.0, 1.0)
            };
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![a, b],
                f: Box::new(move |t| t[0].sub(&t[1])?.mul(&w)?.sum_all()),
            }
        }),
        ("mul", |rng| {
            let shape = [dim(rng), dim(rng)];
            let a = param(rng, &shape, -1.0, 1.0);
            let b = if rng.gen_bool(0.5) {
                param(rng, &shape, -1.0, 1.0)
            } else {
                param(rng, &[shape[1]], -1.0, 1.0)
            };
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![a, b],
                f: Box::new(move |t| t[0].mul(&t[1])?.mul(&w)?.sum_all()),
            }
        }),
        ("add_scalar", |rng| {
            let shape = [dim(rng), dim(rng)];
            let x = param(rng, &shape, -1.0, 1.0);
            let c = rng.gen_range(-2.0..2.0);
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].add_scalar(c)?.mul(&w)?.sum_all()),
            }
        }),
        ("mul_scalar", |rng| {
            let shape = [dim(rng), dim(rng)];
            let x = param(rng, &shape, -1.0, 1.0);
            let c = rng.gen_range(-2.0..2.0);
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].mul_scalar(c)?.mul(&w)?.sum_all()),
            }
        }),
        ("neg", |rng| unary_case!(rng, -1.0, 1.0, neg)),
        ("gelu", |rng| unary_case!(rng, -2.0, 2.0, gelu)),
        ("log", |rng| unary_case!(rng, 0.4, 2.0, log)),
        ("sqrt", |rng| unary_case!(rng, 0.4, 2.0, sqrt)),
        ("clamp_min", |rng| {
            // Values stay clear of the hinge so central differences are valid
            // on both the pass-through and the clamped branch.
            let shape = [dim(rng), dim(rng)];
            let data: Vec<f64> = (0..shape.iter().product())
                .map(|_| {
                    let v = rng.gen_range(0.3..1.3);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let x = Tensor::param(data, &shape).unwrap();
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].clamp_min(0.0)?.mul(&w)?.sum_all()),
            }
        }),
        ("gather_rows", |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let table = param(rng, &[r, c], -1.0, 1.0);
            // with repeats, so scatter-add accumulation is exercised
            let k = dim(rng) + 1;
            let ids: Vec<usize> = (0..k).map(|_| rng.gen_range(0..r)).collect();
            let w = weigh(rng, &[k, c]);
            CaseInstance {
                inputs: vec![table],
                f: Box::new(move |t| t[0].gather_rows(&ids)?.mul(&w)?.sum_all()),
            }
        }),
        ("concat", |rng| {
            let axis = rng.gen_range(0..2usize);
            let other = dim(rng);
            let (l0, l1) = (dim(rng), dim(rng));
            let shape_of = |l: usize| -> Vec<usize> {
                if axis == 0 {
                    vec![l, other]
                } else {
                    vec![other, l]
                }
            };
            let a = param(rng, &shape_of(l0), -1.0, 1.0);
            let b = param(rng, &shape_of(l1), -1.0, 1.0);
            let w = weigh(rng, &shape_of(l0 + l1));
            CaseInstance {
                inputs: vec![a, b],
                f: Box::new(move |t| Tensor::concat(&[&t[0], &t[1]], axis)?.mul(&w)?.sum_all()),
            }
        }),
        ("slice", |rng| {
            let shape = [dim(rng) + 2, dim(rng) + 2];
            let axis = rng.gen_range(0..2usize);
            let len = rng.gen_range(1..shape[axis]);
            let start = rng.gen_range(0..=(shape[axis] - len));
            let x = param(rng, &shape, -1.0, 1.0);
            let mut w_shape = shape.to_vec();
            w_shape[axis] = len;
            let w = weigh(rng, &w_shape);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].slice(axis, start, len)?.mul(&w)?.sum_all()),
            }
        }),
        ("transpose", |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let x = param(rng, &[r, c], -1.0, 1.0);
            let w = weigh(rng, &[c, r]);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].transpose()?.mul(&w)?.sum_all()),
            }
        }),
        ("sum_all", |rng| {
            let shape = [dim(rng), dim(rng)];
            let x = param(rng, &shape, -1.0, 1.0);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].sum_all()),
            }
        }),
        ("mean_all", |rng| {
            let shape = [dim(rng), dim(rng)];
            let x = param(rng, &shape, -1.0, 1.0);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].mean_all()),
            }
        }),
        ("sum_axis", |rng| {
            let shape = [dim(rng), dim(rng)];
            let axis = rng.gen_range(0..2usize);
            let x = param(rng, &shape, -1.0, 1.0);
            let w = weigh(rng, &[shape[1 - axis]]);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].sum_axis(axis)?.mul(&w)?.sum_all()),
            }
        }),
        ("mean_axis", |rng| {
            let shape = [dim(rng), dim(rng)];
            let axis = rng.gen_range(0..2usize);
            let x = param(rng, &shape, -1.0, 1.0);
            let w = weigh(rng, &[shape[1 - axis]]);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].mean_axis(axis)?.mul(&w)?.sum_all()),
            }
        }),
        ("broadcast_to", |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let x = param(rng, &[1, c], -1.0, 1.0);
            let w = weigh(rng, &[r, c]);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].broadcast_to(&[r, c])?.mul(&w)?.sum_all()),
            }
        }),
        ("softmax", |rng| {
            let shape = [dim(rng), dim(rng)];
            let axis = rng.gen_range(0..2usize);
            let x = param(rng, &shape, -2.0, 2.0);
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![x],
                f: Box::new(move |t| t[0].softmax(axis)?.mul(&w)?.sum_all()),
            }
        }),
        ("layer_norm", |rng| {
            let shape = [dim(rng), dim(rng) + 1];
            let x = param(rng, &shape, -1.5, 1.5);
            let gamma = param(rng, &[shape[1]], 0.5, 1.5);
            let beta = param(rng, &[shape[1]], -0.5, 0.5);
            let w = weigh(rng, &shape);
            CaseInstance {
                inputs: vec![x, gamma, beta],
                f: Box::new(move |t| {
                    t[0].layer_norm(&t[1], &t[2], 1e-6)?.mul(&w)?.sum_all()
                }),
            }
        }),
    ];
    gens.into_iter()
        .enumerate()
        .map(|(ordinal, (name, gen))| PrimitiveCase { name, ordinal, gen })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_names_are_unique() {
        let catalogue = primitive_catalogue();
        let mut names: Vec<&str> = catalogue.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), catalogue.len());
    }
}
