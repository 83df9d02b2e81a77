use rand::Rng;

use crate::error::Result;
use crate::peft::{adapter_apply, lora_apply};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Frozen pre-norm transformer block with single-head attention.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub(crate) fn dense<T: Scalar, R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn([out, inp], 1.0 / (inp as f64).sqrt(), rng)
}

impl<T: Scalar> Block<T> {
    pub fn random<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            wq: dense(d, d, rng),
            wk: dense(d, d, rng),
            wv: dense(d, d, rng),
            wo: dense(d, d, rng),
            w1: dense(hidden, d, rng),
            b1: Tensor::randn([hidden], 0.02, rng),
            w2: dense(d, hidden, rng),
            b2: Tensor::randn([d], 0.02, rng),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BlockVars {
        BlockVars {
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            wo: g.constant(self.wo.clone()),
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

/// Runs one block over `x` (`n × d`). `lora` carries `[A_q, B_q, A_v, B_v]`,
/// `adapter` carries `[W_up, W_dn]` applied to the block output.
pub(crate) fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &BlockVars,
    x: Var,
    lora: Option<[Var; 4]>,
    adapter: Option<[Var; 2]>,
) -> Result<Var> {
    let d = g.value(x).cols();
    let a = g.layernorm(x);
    let (q, v) = match lora {
        Some([aq, bq, av, bv]) => (
            lora_apply(g, a, b.wq, aq, bq)?,
            lora_apply(g, a, b.wv, av, bv)?,
        ),
        None => (g.matmul_nt(a, b.wq)?, g.matmul_nt(a, b.wv)?),
    };
    let k = g.matmul_nt(a, b.wk)?;
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, T::of(1.0 / (d as f64).sqrt()));
    let p = g.softmax(s, 1)?;
    let o = g.matmul(p, v)?;
    let o = g.matmul_nt(o, b.wo)?;
    let x1 = g.add(x, o)?;

    let h = g.layernorm(x1);
    let h = g.matmul_nt(h, b.w1)?;
    let h = g.add_row(h, b.b1)?;
    let h = g.relu(h);
    let h = g.matmul_nt(h, b.w2)?;
    let h = g.add_row(h, b.b2)?;
    let x2 = g.add(x1, h)?;
    match adapter {
        Some([up, dn]) => adapter_apply(g, x2, up, dn),
        None => Ok(x2),
    }
}

/// Fixed sinusoidal position table, `len × d`.
pub(crate) fn sinusoidal<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::of(if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}
