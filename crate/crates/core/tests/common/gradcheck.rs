//! Central finite-difference check of every tape primitive on random graphs.

use prefnet::autodiff::{BatchNormStats, Tape, Tensor, Var};
use prefnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Inputs closer than this to a kink are redrawn.
pub const KINK_GAP: f64 = 1e-3;

type Body = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// One random graph: its inputs and the computation on them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    body: Body,
    head: Tensor,
}

#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub graphs: usize,
    pub worst: f64,
    pub failures: usize,
}

impl Case {
    fn new(inputs: Vec<Tensor>, body: Body, rng: &mut ChaCha8Rng) -> Self {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = (body)(&tape, &vars).expect("well-formed graph").shape();
        let n: usize = shape.iter().product();
        let head = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        Case { inputs, body, head }
    }

    /// `sum(w * y) + 0.1 * sum(y * y)` for the graph output `y`.
    fn loss<'t>(&self, tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        let y = (self.body)(tape, vars).unwrap();
        let w = tape.constant(self.head.clone());
        let lin = y.mul(w).unwrap().sum();
        lin.add(y.mul(y).unwrap().sum().scale(0.1)).unwrap()
    }

    fn value(&self, inputs: &[Tensor]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        self.loss(&tape, &vars).value().item()
    }

    /// Worst relative error between tape and finite-difference gradients.
    pub fn worst_error(&self) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = self.loss(&tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v);
            for e in 0..self.inputs[k].numel() {
                let mut plus = self.inputs.clone();
                plus[k].data_mut()[e] += STEP;
                let mut minus = self.inputs.clone();
                minus[k].data_mut()[e] -= STEP;
                let numeric = (self.value(&plus) - self.value(&minus)) / (2.0 * STEP);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-2, 2]` at least [`KINK_GAP`] away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() > KINK_GAP {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Redraws until no output column has its two largest entries within the gap.
fn distinct_along(rng: &mut ChaCha8Rng, shape: &[usize], axis: usize) -> Tensor {
    loop {
        let t = uniform(rng, shape, -2.0, 2.0);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let ok = (0..outer).all(|o| {
            (0..inner).all(|i| {
                let mut col: Vec<f64> = (0..len).map(|l| t.data()[(o * len + l) * inner + i]).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                len < 2 || col[0] - col[1] > KINK_GAP
            })
        });
        if ok {
            break t;
        }
    }
}

type Builder = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Body);

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |r| {
            let (a, b, c) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
            (
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[b, c], -1.0, 1.0)],
                Box::new(|_, v| v[0].matmul(v[1])),
            )
        }),
        ("add", |r| {
            let s = dims(r, 3);
            let tail = s[1..].to_vec();
            (
                vec![uniform(r, &s, -1.0, 1.0), uniform(r, &tail, -1.0, 1.0)],
                Box::new(|_, v| v[0].add(v[1])),
            )
        }),
        ("sub", |r| {
            let s = dims(r, 2);
            (
                vec![uniform(r, &s, -1.0, 1.0), uniform(r, &[s[0], 1], -1.0, 1.0)],
                Box::new(|_, v| v[0].sub(v[1])),
            )
        }),
        ("mul", |r| {
            let s = dims(r, 3);
            (
                vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)],
                Box::new(|_, v| v[0].mul(v[1])),
            )
        }),
        ("div", |r| {
            let s = dims(r, 2);
            (
                vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, 0.5, 2.0)],
                Box::new(|_, v| v[0].div(v[1])),
            )
        }),
        ("relu", |r| {
            let s = dims(r, 2);
            (vec![away_from_zero(r, &s)], Box::new(|_, v| Ok(v[0].relu())))
        }),
        ("tanh", |r| {
            let s = dims(r, 2);
            (vec![uniform(r, &s, -3.0, 3.0)], Box::new(|_, v| Ok(v[0].tanh())))
        }),
        ("sigmoid", |r| {
            let s = dims(r, 2);
            (vec![uniform(r, &s, -4.0, 4.0)], Box::new(|_, v| Ok(v[0].sigmoid())))
        }),
        ("exp", |r| {
            let s = dims(r, 2);
            (vec![uniform(r, &s, -2.0, 2.0)], Box::new(|_, v| Ok(v[0].exp())))
        }),
        ("log", |r| {
            let s = dims(r, 2);
            (vec![uniform(r, &s, 0.1, 3.0)], Box::new(|_, v| v[0].log(1e-12)))
        }),
        ("abs", |r| {
            let s = dims(r, 2);
            (vec![away_from_zero(r, &s)], Box::new(|_, v| Ok(v[0].abs())))
        }),
        ("softmax", |r| {
            let s = dims(r, 3);
            let axis = r.random_range(0..3);
            (
                vec![uniform(r, &s, -2.0, 2.0)],
                Box::new(move |_, v| v[0].softmax(axis)),
            )
        }),
        ("minimum", |r| {
            let s = dims(r, 2);
            let a = uniform(r, &s, -1.0, 1.0);
            let gap: Vec<f64> = (0..a.numel())
                .map(|_| {
                    let g: f64 = r.random_range(KINK_GAP * 2.0..1.0);
                    if r.random::<bool>() { g } else { -g }
                })
                .collect();
            let b = Tensor::new(s.clone(), a.data().iter().zip(&gap).map(|(x, g)| x + g).collect()).unwrap();
            (vec![a, b], Box::new(|_, v| v[0].minimum(v[1])))
        }),
        ("sum_axis", |r| {
            let s = dims(r, 3);
            let axis = r.random_range(0..3);
            (
                vec![uniform(r, &s, -1.0, 1.0)],
                Box::new(move |_, v| v[0].sum_axis(axis)),
            )
        }),
        ("mean_axis", |r| {
            let s = dims(r, 3);
            let axis = r.random_range(0..3);
            (
                vec![uniform(r, &s, -1.0, 1.0)],
                Box::new(move |_, v| v[0].mean_axis(axis)),
            )
        }),
        ("sum_mean_all", |r| {
            let s = dims(r, 2);
            (
                vec![uniform(r, &s, -1.0, 1.0)],
                Box::new(|_, v| v[0].sum().add(v[0].mean().scale(3.0))),
            )
        }),
        ("max_axis", |r| {
            let s = dims(r, 3);
            let axis = r.random_range(0..3);
            (
                vec![distinct_along(r, &s, axis)],
                Box::new(move |_, v| v[0].max_axis(axis)),
            )
        }),
        ("batch_norm_train", |r| {
            let (b, f) = (r.random_range(2..=5), r.random_range(1..=4));
            (
                vec![
                    uniform(r, &[b, f], -2.0, 2.0),
                    uniform(r, &[f], 0.5, 1.5),
                    uniform(r, &[f], -0.5, 0.5),
                ],
                Box::new(move |_, v| {
                    let mut stats = BatchNormStats::new(f);
                    v[0].batch_norm(v[1], v[2], &mut stats, true)
                }),
            )
        }),
        ("batch_norm_eval", |r| {
            let (b, f) = (r.random_range(1..=5), r.random_range(1..=4));
            let mean: Vec<f64> = (0..f).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..f).map(|_| r.random_range(0.2..2.0)).collect();
            (
                vec![
                    uniform(r, &[b, f], -2.0, 2.0),
                    uniform(r, &[f], 0.5, 1.5),
                    uniform(r, &[f], -0.5, 0.5),
                ],
                Box::new(move |_, v| {
                    let mut stats = BatchNormStats {
                        mean: mean.clone(),
                        var: var.clone(),
                    };
                    v[0].batch_norm(v[1], v[2], &mut stats, false)
                }),
            )
        }),
        ("bce", |r| {
            let s = dims(r, 2);
            (
                vec![uniform(r, &s, 0.05, 0.95), uniform(r, &s, 0.0, 1.0)],
                Box::new(|_, v| v[0].bce(v[1])),
            )
        }),
        ("reshape_transpose", |r| {
            let (a, b) = (r.random_range(1..=4), r.random_range(1..=4));
            (
                vec![uniform(r, &[a * b], -1.0, 1.0)],
                Box::new(move |_, v| v[0].reshape(vec![a, b])?.transpose()),
            )
        }),
        ("narrow_concat", |r| {
            let s = dims(r, 2);
            let len = r.random_range(1..=s[1]);
            let start = r.random_range(0..=s[1] - len);
            (
                vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)],
                Box::new(move |t, v| {
                    let part = v[0].narrow(1, start, len)?;
                    t.concat(&[part, v[1]], 1)
                }),
            )
        }),
        ("scale_neg_add_scalar", |r| {
            let s = dims(r, 2);
            (
                vec![uniform(r, &s, -1.0, 1.0)],
                Box::new(|_, v| Ok(v[0].scale(2.5).neg().add_scalar(0.3))),
            )
        }),
        ("dense_layer", |r| {
            // Two-layer net with tanh, the composite the networks use.
            let (b, i, h) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=5));
            (
                vec![
                    uniform(r, &[b, i], -1.0, 1.0),
                    uniform(r, &[i, h], -1.0, 1.0),
                    uniform(r, &[h], -0.5, 0.5),
                    uniform(r, &[h, 2], -1.0, 1.0),
                ],
                Box::new(|_, v| v[0].matmul(v[1])?.add(v[2])?.tanh().matmul(v[3])?.softmax(1)),
            )
        }),
    ]
}

/// Runs `graphs` random graphs per primitive.
pub fn gradient_suite(graphs: usize, seed: u64) -> Vec<PrimitiveReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitives()
        .into_iter()
        .map(|(name, build)| {
            let mut worst: f64 = 0.0;
            let mut failures = 0;
            for _ in 0..graphs {
                let (inputs, body) = build(&mut rng);
                let case = Case::new(inputs, body, &mut rng);
                let err = case.worst_error();
                worst = worst.max(err);
                if !(err < TOLERANCE) {
                    failures += 1;
                }
            }
            PrimitiveReport {
                name,
                graphs,
                worst,
                failures,
            }
        })
        .collect()
}
