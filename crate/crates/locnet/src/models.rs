//! State-evolution and measurement models, their likelihoods, Jacobian
//! determinants, and the derivatives the controller needs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{ControlVec, StateVec};
use crate::error::{Error, Result};

/// Dense row-major matrix capped at 4x4, sized for agent state transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SmallMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && rows <= 4 && cols >= 1 && cols <= 4);
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn mul_slice(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.at(r, c) * x[c]).sum())
            .collect()
    }

    pub fn det(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let m = |r: usize, c: usize| self.at(r, c);
        match self.rows {
            1 => m(0, 0),
            2 => m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
            3 => {
                m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
            }
            4 => {
                let mut det = 0.0;
                for c in 0..4 {
                    let mut sub = Vec::with_capacity(9);
                    for r in 1..4 {
                        for cc in 0..4 {
                            if cc != c {
                                sub.push(m(r, cc));
                            }
                        }
                    }
                    let minor = SmallMat::new(3, 3, sub).det();
                    det += if c % 2 == 0 { 1.0 } else { -1.0 } * m(0, c) * minor;
                }
                det
            }
            _ => unreachable!(),
        }
    }
}

/// State-evolution model of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MotionModel {
    /// `x⁺ = A x + u + W q` with `q ~ N(0, σ_q² I)`. Control enters
    /// additively on the position components. Covers the mobile-CA random
    /// walk (`A = W = I`) and the constant-velocity target model.
    LinearAdditive {
        a: SmallMat,
        w: SmallMat,
        sigma_q2: f64,
    },
    /// Robot pose `(x, y, θ)` driven by translational and rotational
    /// velocity `u = (ν, ω)`. Noise-free here; kept for the unit-Jacobian
    /// control term cases.
    Odometry,
    /// `x⁺ = ((1+u₁)x₁ + u₁ + q₁, x₂ + u₂ + q₂)`: a synthetic model whose
    /// state Jacobian determinant `1 + u₁` depends on the control, used to
    /// exercise the non-vanishing Jacobian gradient path.
    ScaledShift,
}

impl MotionModel {
    /// Mobile-CA random walk `x⁺ = x + u + q`.
    pub fn ca_linear(sigma_q2: f64) -> Self {
        MotionModel::LinearAdditive {
            a: SmallMat::identity(2),
            w: SmallMat::identity(2),
            sigma_q2,
        }
    }

    /// Constant-velocity target: position+velocity state, driving noise
    /// injected into both through `W`.
    pub fn target_cv(sigma_q2: f64) -> Self {
        let g = SmallMat::new(
            4,
            4,
            vec![
                1.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        let w = SmallMat::new(4, 2, vec![0.5, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 1.0]);
        MotionModel::LinearAdditive { a: g, w, sigma_q2 }
    }

    pub fn state_dim(&self) -> Option<usize> {
        match self {
            MotionModel::LinearAdditive { a, .. } => Some(a.rows()),
            MotionModel::Odometry => Some(3),
            MotionModel::ScaledShift => Some(2),
        }
    }

    /// Dimension of the driving-noise vector accepted by [`evolve`].
    pub fn noise_dim(&self) -> usize {
        match self {
            MotionModel::LinearAdditive { w, .. } => w.cols(),
            MotionModel::Odometry => 3,
            MotionModel::ScaledShift => 2,
        }
    }

    /// One driving-noise draw for this model.
    pub fn draw_noise<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            MotionModel::LinearAdditive { sigma_q2, w, .. } => {
                let sd = sigma_q2.sqrt();
                (0..w.cols())
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            // No stochastic driving term in the remaining models.
            _ => vec![0.0; self.noise_dim()],
        }
    }
}

fn check_dims(model: &MotionModel, x: &StateVec, q: &[f64]) -> Result<()> {
    let dim = model.state_dim().unwrap();
    if x.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.dim(),
        });
    }
    if q.len() != model.noise_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.noise_dim(),
            got: q.len(),
        });
    }
    Ok(())
}

/// `x⁺ = g(x, u, q)`.
pub fn evolve(model: &MotionModel, x: &StateVec, u: ControlVec, q: &[f64]) -> Result<StateVec> {
    check_dims(model, x, q)?;
    let out = match model {
        MotionModel::LinearAdditive { a, w, .. } => {
            let mut v = a.mul_slice(x.as_slice());
            v[0] += u.0[0];
            v[1] += u.0[1];
            let wq = w.mul_slice(q);
            for (vi, wqi) in v.iter_mut().zip(wq) {
                *vi += wqi;
            }
            StateVec::new(&v)?
        }
        MotionModel::Odometry => {
            let (nu, om) = (u.0[0], u.0[1]);
            let th = x[2] + om;
            StateVec::new(&[
                x[0] + nu * th.cos() + q[0],
                x[1] + nu * th.sin() + q[1],
                th + q[2],
            ])?
        }
        MotionModel::ScaledShift => StateVec::new(&[
            (1.0 + u.0[0]) * x[0] + u.0[0] + q[0],
            x[1] + u.0[1] + q[1],
        ])?,
    };
    Ok(out)
}

/// `g̃(x, u)`: the evolution with the driving noise replaced by its mean
/// (zero for all implemented models).
pub fn mean_evolve(model: &MotionModel, x: &StateVec, u: ControlVec) -> Result<StateVec> {
    evolve(model, x, u, &vec![0.0; model.noise_dim()])
}

/// Jacobian `∂g̃/∂u` at `(x, u)`, of shape `state_dim x 2`.
pub fn mean_evolve_grad_u(model: &MotionModel, x: &StateVec, u: ControlVec) -> Result<SmallMat> {
    check_dims(model, x, &vec![0.0; model.noise_dim()])?;
    let m = match model {
        MotionModel::LinearAdditive { a, .. } => {
            let n = a.rows();
            let mut data = vec![0.0; n * 2];
            data[0] = 1.0;
            data[2 + 1] = 1.0;
            SmallMat::new(n, 2, data)
        }
        MotionModel::Odometry => {
            let (nu, om) = (u.0[0], u.0[1]);
            let th = x[2] + om;
            SmallMat::new(
                3,
                2,
                vec![
                    th.cos(),
                    -nu * th.sin(),
                    th.sin(),
                    nu * th.cos(),
                    0.0,
                    1.0,
                ],
            )
        }
        MotionModel::ScaledShift => SmallMat::new(2, 2, vec![x[0] + 1.0, 0.0, 0.0, 1.0]),
    };
    Ok(m)
}

/// Determinant of `∂g̃/∂x` at `(x, u)`.
pub fn jacobian_det(model: &MotionModel, _x: &StateVec, u: ControlVec) -> f64 {
    match model {
        MotionModel::LinearAdditive { a, .. } => a.det(),
        MotionModel::Odometry => 1.0,
        MotionModel::ScaledShift => 1.0 + u.0[0],
    }
}

/// Gradient `∂|J_g̃|/∂u` at `(x, u)`; zero whenever the Jacobian does not
/// depend on the control.
pub fn jacobian_det_grad_u(model: &MotionModel, _x: &StateVec, u: ControlVec) -> [f64; 2] {
    match model {
        MotionModel::LinearAdditive { .. } | MotionModel::Odometry => [0.0, 0.0],
        MotionModel::ScaledShift => [(1.0 + u.0[0]).signum(), 0.0],
    }
}

/// Distance measurement model: `y = ‖p_l − p_k‖ + v` with
/// `v ~ N(0, σ²(d))`, where the noise variance is flat up to the knee
/// distance `d0` and grows polynomially beyond it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasModel {
    pub sigma0_2: f64,
    pub d0: f64,
    pub kappa: f64,
}

impl MeasModel {
    pub fn new(sigma0_2: f64, d0: f64, kappa: f64) -> Self {
        assert!(sigma0_2 > 0.0 && d0 > 0.0 && kappa >= 0.0);
        Self {
            sigma0_2,
            d0,
            kappa,
        }
    }

    fn pow_kappa(&self, x: f64) -> f64 {
        if self.kappa == 2.0 {
            x * x
        } else if self.kappa == 1.0 {
            x
        } else {
            x.powf(self.kappa)
        }
    }

    /// `σ²(d)` as a function of the (hypothesized) inter-agent distance.
    pub fn noise_var(&self, dist: f64) -> f64 {
        if dist <= self.d0 {
            self.sigma0_2
        } else {
            self.sigma0_2 * (self.pow_kappa(dist / self.d0 - 1.0) + 1.0)
        }
    }

    /// `dσ²/dd`; zero on the flat region.
    fn noise_var_ddist(&self, dist: f64) -> f64 {
        if dist <= self.d0 || self.kappa == 0.0 {
            0.0
        } else {
            let base = dist / self.d0 - 1.0;
            let dpow = if self.kappa == 2.0 {
                2.0 * base
            } else if self.kappa == 1.0 {
                1.0
            } else {
                self.kappa * base.powf(self.kappa - 1.0)
            };
            self.sigma0_2 * dpow / self.d0
        }
    }

    pub fn noise_stddev(&self, dist: f64) -> Result<f64> {
        if dist < 0.0 {
            return Err(Error::NegativeDistance(dist));
        }
        Ok(self.noise_var(dist).sqrt())
    }

    /// Draws one noisy distance measurement between the two states.
    pub fn measure<R: Rng>(&self, x_l: &StateVec, x_k: &StateVec, rng: &mut R) -> f64 {
        let d = dist(x_l, x_k);
        let z: f64 = rng.sample(StandardNormal);
        d + self.noise_var(d).sqrt() * z
    }

    /// Log of the local likelihood `f(y | x_l, x_k)`.
    pub fn log_likelihood(&self, y: f64, x_l: &StateVec, x_k: &StateVec) -> f64 {
        self.log_pdf_at(y, dist(x_l, x_k))
    }

    /// Log Gaussian density of `y` at mean `d` with variance `σ²(d)`.
    pub fn log_pdf_at(&self, y: f64, d: f64) -> f64 {
        let s = self.noise_var(d);
        let r = y - d;
        -0.5 * (2.0 * std::f64::consts::PI * s).ln() - r * r / (2.0 * s)
    }

    /// Local likelihood `f(y | x_l, x_k)`; strictly positive.
    pub fn likelihood(&self, y: f64, x_l: &StateVec, x_k: &StateVec) -> f64 {
        self.log_likelihood(y, x_l, x_k).exp()
    }

    /// `∂ log f / ∂d` at measured value `y` and hypothesized distance `d`.
    /// Includes the variance's distance dependence beyond the knee.
    pub fn score_vs_distance(&self, y: f64, d: f64) -> f64 {
        let s = self.noise_var(d);
        let ds = self.noise_var_ddist(d);
        let r = y - d;
        r / s + ds * (r * r / (2.0 * s * s) - 0.5 / s)
    }

    /// Gradient of the likelihood density with respect to the measuring
    /// CA's position (the first two components of `x_l`).
    pub fn likelihood_grad_xl(&self, y: f64, x_l: &StateVec, x_k: &StateVec) -> Result<[f64; 2]> {
        let [lx, ly] = x_l.pos();
        let [kx, ky] = x_k.pos();
        let d = ((lx - kx).powi(2) + (ly - ky).powi(2)).sqrt();
        if d == 0.0 {
            return Err(Error::CoincidentPositions);
        }
        let g = self.log_pdf_at(y, d).exp() * self.score_vs_distance(y, d);
        Ok([g * (lx - kx) / d, g * (ly - ky) / d])
    }
}

/// Euclidean distance between the position components of two states.
pub fn dist(a: &StateVec, b: &StateVec) -> f64 {
    let [ax, ay] = a.pos();
    let [bx, by] = b.pos();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}
