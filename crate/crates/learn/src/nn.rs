//! A small fully connected network with hand-written backpropagation, and Adam.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// `tanh` on every hidden layer, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass; column `j` is sample `j`.
pub struct Cache {
    activations: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Mlp {
    /// Glorot-normal weights, zero biases; the output layer is scaled by `out_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            if k == sizes.len() - 2 {
                std *= out_scale;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(rng));
            layers.push(Dense {
                w,
                b: DVector::zeros(fan_out),
            });
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            if k < last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(a);
            a = z;
        }
        (a, Cache { activations })
    }

    pub fn forward_one(&self, x: &[f64]) -> DVector<f64> {
        let mut a = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a + &layer.b;
            if k < last {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    /// Gradients of a loss whose derivative with respect to the output is `d_out`.
    pub fn backward(&self, cache: &Cache, d_out: DMatrix<f64>) -> Grads {
        let n = self.layers.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = d_out;
        for k in (0..n).rev() {
            let a_in = &cache.activations[k];
            gw.push(&delta * a_in.transpose());
            gb.push(delta.column_sum());
            if k > 0 {
                let mut back = self.layers[k].w.transpose() * &delta;
                back.zip_apply(a_in, |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Grads { w: gw, b: gb }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

impl Grads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.w.len());
        for (w, b) in self.w.iter().zip(&self.b) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}

/// Adam over a fixed list of parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Descends along `grads`, which are scaled by `scale` first.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], scale: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter groups changed");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Sum of squares over all slices.
pub fn squared_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[3, 5, 4, 2], 1.0, &mut rng);
        let x = DMatrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        let target = DMatrix::from_fn(2, 7, |i, j| ((i + j) as f64 * 0.11).cos());
        let loss = |n: &Mlp| {
            let (y, _) = n.forward(&x);
            0.5 * (y - &target).norm_squared()
        };
        let (y, cache) = net.forward(&x);
        let g = net.backward(&cache, y - &target);
        let h = 1e-6;
        for (k, (r, c)) in [(0, (1, 2)), (1, (3, 0)), (2, (1, 3))] {
            let orig = net.layers[k].w[(r, c)];
            net.layers[k].w[(r, c)] = orig + h;
            let up = loss(&net);
            net.layers[k].w[(r, c)] = orig - h;
            let down = loss(&net);
            net.layers[k].w[(r, c)] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g.w[k][(r, c)]).abs() < 1e-6,
                "layer {k}: {fd} vs {}",
                g.w[k][(r, c)]
            );
        }
        let orig = net.layers[1].b[2];
        net.layers[1].b[2] = orig + h;
        let up = loss(&net);
        net.layers[1].b[2] = orig - h;
        let down = loss(&net);
        assert!(((up - down) / (2.0 * h) - g.b[1][2]).abs() < 1e-6);
    }

    #[test]
    fn single_and_batched_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 8, 2], 0.5, &mut rng);
        let x = DMatrix::from_fn(4, 3, |i, j| i as f64 - j as f64 * 0.5);
        let (y, _) = net.forward(&x);
        for j in 0..3 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let one = net.forward_one(&col);
            assert!((one - y.column(j)).norm() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(vec![x.as_mut_slice()], &[g.as_slice()], 1.0);
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2);
    }
}
