//! Row-wise Adam with per-row step counts, so rows added mid-training get
//! their own bias correction.

use crate::tape::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Rounds through f32, so state can be stored losslessly in 32-bit checkpoints.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to each row.
    pub steps: Vec<u32>,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> AdamState {
        AdamState { m: Tensor::zeros(rows, cols), v: Tensor::zeros(rows, cols), steps: vec![0; rows] }
    }

    pub fn for_param(p: &Tensor) -> AdamState {
        AdamState::new(p.rows, p.cols)
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    /// Appends fresh rows until there are `rows`.
    pub fn grow(&mut self, rows: usize) {
        let cols = self.m.cols;
        if rows <= self.rows() {
            return;
        }
        let extra = rows - self.rows();
        self.m.data.extend(std::iter::repeat_n(0.0, extra * cols));
        self.v.data.extend(std::iter::repeat_n(0.0, extra * cols));
        self.m.rows = rows;
        self.v.rows = rows;
        self.steps.extend(std::iter::repeat_n(0, extra));
    }

    /// Keeps only rows whose flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        self.m = retain_rows(&self.m, keep);
        self.v = retain_rows(&self.v, keep);
        self.steps = self.steps.iter().zip(keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect();
    }

    /// One update of `param` with `lr · row_scale[r]` per row. Rows with a
    /// zero learning rate are left untouched, moments included.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor, lr: f64, row_scale: Option<&[f64]>) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape");
        assert_eq!(param.rows, self.rows(), "optimizer rows");
        let cols = param.cols;
        for r in 0..param.rows {
            let rate = lr * row_scale.map_or(1.0, |s| s[r]);
            if rate == 0.0 {
                continue;
            }
            self.steps[r] += 1;
            let t = self.steps[r] as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            for c in 0..cols {
                let i = r * cols + c;
                let g = grad.data[i];
                let m = quantize(BETA1 * self.m.data[i] + (1.0 - BETA1) * g);
                let v = quantize(BETA2 * self.v.data[i] + (1.0 - BETA2) * g * g);
                self.m.data[i] = m;
                self.v.data[i] = v;
                let update = rate * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                param.data[i] = quantize(param.data[i] - update);
            }
        }
    }
}

pub fn retain_rows(t: &Tensor, keep: &[bool]) -> Tensor {
    assert_eq!(t.rows, keep.len(), "mask length");
    let mut data = Vec::with_capacity(t.data.len());
    for (r, &k) in keep.iter().enumerate() {
        if k {
            data.extend_from_slice(t.row(r));
        }
    }
    let rows = data.len() / t.cols.max(1);
    Tensor::from_vec(if t.cols == 0 { 0 } else { rows }, t.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::from_vec(2, 2, vec![0.5, -2.0, 0.0, 1e3]);
        let mut s = AdamState::for_param(&p);
        s.step(&mut p, &g, 0.01, None);
        let expect = [0.99, 2.01, 3.0, 3.99];
        for (a, b) in p.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(s.steps, vec![1, 1]);
    }

    #[test]
    fn zero_rate_rows_untouched() {
        let mut p = Tensor::from_vec(2, 1, vec![1.0, 1.0]);
        let g = Tensor::from_vec(2, 1, vec![1.0, 1.0]);
        let mut s = AdamState::for_param(&p);
        s.step(&mut p, &g, 0.1, Some(&[0.0, 1.0]));
        assert_eq!(p.data[0], 1.0);
        assert_eq!(s.m.data[0], 0.0);
        assert_eq!(s.steps, vec![0, 1]);
    }

    #[test]
    fn grow_and_retain() {
        let mut s = AdamState::new(2, 3);
        s.m.data[3] = 7.0;
        s.grow(4);
        assert_eq!(s.m.shape(), (4, 3));
        s.retain(&[false, true, false, true]);
        assert_eq!(s.m.shape(), (2, 3));
        assert_eq!(s.m.data[0], 7.0);
        assert_eq!(s.steps.len(), 2);
    }
}
