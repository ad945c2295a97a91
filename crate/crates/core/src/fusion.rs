//! Low-rank bilinear pooling with shortcut connections.
//!
//! Two `Q`-dim modality vectors are combined as
//!
//! ```text
//! c* = P (tanh(U1ᵀ e1) ⊙ tanh(U2ᵀ e2)) + b
//! c  = c* + V1 e1 + V2 e2
//! ```
//!
//! where `U1, U2` are `Q x D`, `P` is `O x D` and `V1, V2` are `O x Q`.

use crate::error::{Error, Result};
use crate::numerics::{Graph, RngStream, Tensor, Var};

/// Full-size shapes: 768-dim inputs, 256-dim rank and output.
pub const FULL_INPUT_DIM: usize = 768;
pub const FULL_RANK: usize = 256;
pub const FULL_OUTPUT_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub u1: Tensor,
    pub u2: Tensor,
    pub p: Tensor,
    /// `1 x O`
    pub b: Tensor,
    pub v1: Tensor,
    pub v2: Tensor,
}

impl FusionParams {
    /// Uniform(-s, s) with s = 1/sqrt(fan-in) for every matrix and the bias.
    pub fn init(input_dim: usize, rank: usize, output_dim: usize, rng: &mut RngStream) -> Self {
        let mut u = |rows, cols, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-s, s)).collect())
        };
        FusionParams {
            u1: u(input_dim, rank, input_dim),
            u2: u(input_dim, rank, input_dim),
            p: u(output_dim, rank, rank),
            b: u(1, output_dim, rank),
            v1: u(output_dim, input_dim, input_dim),
            v2: u(output_dim, input_dim, input_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.u1.rows()
    }

    pub fn rank(&self) -> usize {
        self.u1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.p.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (q, d, o) = (self.input_dim(), self.rank(), self.output_dim());
        let expect = [
            ("u1", &self.u1, (q, d)),
            ("u2", &self.u2, (q, d)),
            ("p", &self.p, (o, d)),
            ("b", &self.b, (1, o)),
            ("v1", &self.v1, (o, q)),
            ("v2", &self.v2, (o, q)),
        ];
        for (name, t, dims) in expect {
            if t.dims2() != dims {
                return Err(Error::Usage(format!("fusion {name} has shape {:?}, expected {dims:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("fusion {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Registers the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> FusionVars {
        FusionVars {
            u1: g.param(self.u1.clone()),
            u2: g.param(self.u2.clone()),
            p: g.param(self.p.clone()),
            b: g.param(self.b.clone()),
            v1: g.param(self.v1.clone()),
            v2: g.param(self.v2.clone()),
        }
    }
}

/// Graph handles of the fusion parameters.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub u1: Var,
    pub u2: Var,
    pub p: Var,
    pub b: Var,
    pub v1: Var,
    pub v2: Var,
}

/// Fuses one pair of modality vectors.
pub fn fuse(e1: &[f64], e2: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    let q = params.input_dim();
    if e1.len() != q || e2.len() != q {
        return Err(Error::Usage(format!("fusion expects two {q}-dim inputs, got {} and {}", e1.len(), e2.len())));
    }
    let mut g = Graph::new();
    let vars = FusionVars {
        u1: g.constant(params.u1.clone()),
        u2: g.constant(params.u2.clone()),
        p: g.constant(params.p.clone()),
        b: g.constant(params.b.clone()),
        v1: g.constant(params.v1.clone()),
        v2: g.constant(params.v2.clone()),
    };
    let a = g.constant(Tensor::row_vector(e1.to_vec()));
    let t = g.constant(Tensor::row_vector(e2.to_vec()));
    let c = fuse_rows(&mut g, a, t, &vars);
    Ok(g.value(c).data().to_vec())
}

/// Row-wise fusion of `N x Q` audio and text matrices into `N x O`.
pub fn fuse_rows(g: &mut Graph, e1: Var, e2: Var, p: &FusionVars) -> Var {
    let z1 = g.matmul(e1, p.u1);
    let h1 = g.tanh(z1);
    let z2 = g.matmul(e2, p.u2);
    let h2 = g.tanh(z2);
    let joint = g.mul(h1, h2);
    let projected = g.matmul_nt(joint, p.p);
    let c_star = g.add_row(projected, p.b);
    let s1 = g.matmul_nt(e1, p.v1);
    let s2 = g.matmul_nt(e2, p.v2);
    let c = g.add(c_star, s1);
    g.add(c, s2)
}
