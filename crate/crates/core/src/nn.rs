//! Parameter bundles shared by the encoders and the fusion heads, plus the
//! row-stacking helpers that stand in for a reshape primitive.


use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
pub fn glorot(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = if fan_in + fan_out == 0 {
        0.0
    } else {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect()
}

/// `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::param(vec![fan_in, fan_out], glorot(rng, fan_in, fan_out))
                .expect("glorot shape"),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Zero weight and zero bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(vec![fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, rng),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    /// Identity affine: gamma = 1, beta = 0.
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::param(vec![width], vec![1.0; width]).expect("ones"),
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![width]));
        Self { gamma, beta }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

fn rows_cols(tape: &Tape<'_>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// Vertical stack of 2-D blocks with equal width.
pub fn stack_rows(tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::invalid("stack_rows", "no parts"));
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let mut dims = Vec::with_capacity(parts.len());
    for &p in parts {
        dims.push(rows_cols(tape, p, "stack_rows")?);
    }
    let width = dims[0].1;
    if let Some(&(r, c)) = dims.iter().find(|d| d.1 != width) {
        return Err(Error::shape("stack_rows", &[dims[0].0, width], &[r, c]));
    }
    let total: usize = dims.iter().map(|d| d.0).sum();
    let mut acc: Option<Var> = None;
    let mut offset = 0;
    for (&p, &(r, _)) in parts.iter().zip(&dims) {
        let mut sel = vec![0.0; total * r];
        for i in 0..r {
            sel[(offset + i) * r + i] = 1.0;
        }
        let s = tape.constant(vec![total, r], sel)?;
        let placed = tape.matmul(s, p)?;
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed)?,
        });
        offset += r;
    }
    Ok(acc.expect("non-empty"))
}

/// Row `row` of a 2-D value, as shape `[1, cols]`.
pub fn select_row(tape: &mut Tape<'_>, x: Var, row: usize) -> Result<Var> {
    let (r, _) = rows_cols(tape, x, "select_row")?;
    if row >= r {
        return Err(Error::invalid(
            "select_row",
            format!("row {row} out of range for {r} rows"),
        ));
    }
    let mut sel = vec![0.0; r];
    sel[row] = 1.0;
    let s = tape.constant(vec![1, r], sel)?;
    tape.matmul(s, x)
}

/// Every row of `x` laid end to end, shape `[1, rows·cols]`.
pub fn flatten_rows(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let (r, _) = rows_cols(tape, x, "flatten_rows")?;
    if r == 1 {
        return Ok(x);
    }
    let mut rows = Vec::with_capacity(r);
    for i in 0..r {
        rows.push(select_row(tape, x, i)?);
    }
    tape.concat(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_select_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = tape.constant(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let s = stack_rows(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(s), &[3, 3]);
        assert_eq!(
            tape.value(s),
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 8.0, 9.0]
        );
        let r = select_row(&mut tape, s, 2).unwrap();
        assert_eq!(tape.value(r), &[7.0, 8.0, 9.0]);
        let f = flatten_rows(&mut tape, s).unwrap();
        assert_eq!(tape.shape(f), &[1, 9]);
        assert_eq!(tape.value(f)[6..], [7.0, 8.0, 9.0]);
    }

    #[test]
    fn stack_rejects_width_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![0.0; 2]).unwrap();
        let b = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            stack_rows(&mut tape, &[a, b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = SeededRng::new(3);
        let w = glorot(&mut rng, 4, 8);
        let limit = (6.0f64 / 12.0).sqrt();
        assert_eq!(w.len(), 32);
        assert!(w.iter().all(|v| v.abs() <= limit));
    }
}
