//! Scalar fields on a uniform `N × N` torus grid.
//!
//! Values are interpolated with tensor-product periodic cubic Lagrange
//! stencils. A field may also carry an exact trigonometric-polynomial
//! representation, in which case point evaluation is spectral.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::torus::TorusPoint;

/// Left stencil index and the four periodic cubic Lagrange weights for
/// coordinate `x ∈ [0, 1)` on an `n`-point grid.
#[inline]
pub fn periodic_cubic_weights(x: f64, n: usize) -> (usize, [f64; 4]) {
    let t = x * n as f64;
    let i = t.floor();
    let s = t - i;
    let i = (i as i64).rem_euclid(n as i64) as usize;
    let w = [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ];
    ((i + n - 1) % n, w)
}

/// Nonzero frequencies `m` with `|m₁|, |m₂| ≤ F` modulo `m ~ −m`: all
/// `(m₁, m₂)` with `m₂ > 0`, plus `(m₁, 0)` with `m₁ > 0`. Ordered by `m₂`,
/// then `m₁`.
pub fn half_set(cutoff: usize) -> Vec<[i32; 2]> {
    let f = cutoff as i32;
    let mut out = Vec::with_capacity(2 * cutoff * (cutoff + 1));
    for m2 in 0..=f {
        for m1 in -f..=f {
            if m2 > 0 || m1 > 0 {
                out.push([m1, m2]);
            }
        }
    }
    out
}

/// Real trigonometric polynomial
/// `c₀ + Σ_{m ∈ H} (a_m cos 2πm·x + b_m sin 2πm·x)` over [`half_set`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrigPoly {
    cutoff: usize,
    constant: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl TrigPoly {
    pub fn zero(cutoff: usize) -> Self {
        let m = half_set(cutoff).len();
        Self {
            cutoff,
            constant: 0.0,
            cos: vec![0.0; m],
            sin: vec![0.0; m],
        }
    }

    pub fn from_coefficients(cutoff: usize, constant: f64, cos: Vec<f64>, sin: Vec<f64>) -> Result<Self> {
        let m = half_set(cutoff).len();
        if cos.len() != m || sin.len() != m {
            return Err(Error::InvalidArgument(format!(
                "expected {m} coefficients per basis family"
            )));
        }
        Ok(Self {
            cutoff,
            constant,
            cos,
            sin,
        })
    }

    /// Sets the coefficient pair of frequency `m` (given in either sign).
    pub fn set(&mut self, m: [i32; 2], cos: f64, sin: f64) {
        let (idx, flip) = self.index_of(m).expect("frequency within cutoff");
        self.cos[idx] = cos;
        self.sin[idx] = if flip { -sin } else { sin };
    }

    fn index_of(&self, m: [i32; 2]) -> Option<(usize, bool)> {
        let f = self.cutoff as i32;
        let (m, flip) = if m[1] < 0 || (m[1] == 0 && m[0] < 0) {
            ([-m[0], -m[1]], true)
        } else {
            (m, false)
        };
        if m == [0, 0] || m[0].abs() > f || m[1] > f {
            return None;
        }
        let idx = if m[1] == 0 {
            (m[0] - 1) as usize
        } else {
            (f + (m[1] - 1) * (2 * f + 1) + (m[0] + f)) as usize
        };
        Some((idx, flip))
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn set_constant(&mut self, c: f64) {
        self.constant = c;
    }

    pub fn cos_coefficients(&self) -> &[f64] {
        &self.cos
    }

    pub fn sin_coefficients(&self) -> &[f64] {
        &self.sin
    }

    pub fn eval(&self, p: TorusPoint) -> f64 {
        let f = self.cutoff;
        let z1 = Complex64::cis(TAU * p.x1());
        let z2 = Complex64::cis(TAU * p.x2());
        let mut pw1 = vec![Complex64::new(1.0, 0.0); 2 * f + 1];
        for k in 1..=f {
            pw1[f + k] = pw1[f + k - 1] * z1;
            pw1[f - k] = pw1[f - k + 1] * z1.conj();
        }
        let mut acc = self.constant;
        let mut idx = 0;
        // m2 = 0 row: m1 = 1..F.
        for k in 1..=f {
            let e = pw1[f + k];
            acc += self.cos[idx] * e.re + self.sin[idx] * e.im;
            idx += 1;
        }
        let mut row = Complex64::new(1.0, 0.0);
        for _m2 in 1..=f {
            row *= z2;
            for e1 in &pw1 {
                let e = e1 * row;
                acc += self.cos[idx] * e.re + self.sin[idx] * e.im;
                idx += 1;
            }
        }
        acc
    }

    /// Coefficients from grid samples, truncated to `cutoff < n/2`.
    pub fn from_samples(n: usize, values: &[f64], cutoff: usize) -> Result<Self> {
        if 2 * cutoff >= n {
            return Err(Error::InvalidArgument(format!(
                "frequency cutoff {cutoff} must be below n/2 = {}",
                n / 2
            )));
        }
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(n, &mut data, false);
        let norm = 1.0 / (n * n) as f64;
        let at = |m: [i32; 2]| {
            let i = m[0].rem_euclid(n as i32) as usize;
            let j = m[1].rem_euclid(n as i32) as usize;
            data[i * n + j]
        };
        let modes = half_set(cutoff);
        let mut cos = Vec::with_capacity(modes.len());
        let mut sin = Vec::with_capacity(modes.len());
        for m in &modes {
            let c = at(*m);
            cos.push(2.0 * norm * c.re);
            sin.push(-2.0 * norm * c.im);
        }
        Ok(Self {
            cutoff,
            constant: norm * data[0].re,
            cos,
            sin,
        })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cutoff: self.cutoff,
            constant: s * self.constant,
            cos: self.cos.iter().map(|x| s * x).collect(),
            sin: self.sin.iter().map(|x| s * x).collect(),
        }
    }

    pub fn sample(&self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.eval(TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64)));
            }
        }
        out
    }
}

/// Forward and inverse 1D plans of one size, reusable across many 2D
/// transforms.
#[derive(Clone)]
pub struct Fft2Plan {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2Plan {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// In-place unnormalized 2D DFT of a row-major `n × n` array.
    pub fn process(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(data.len(), n * n, "FFT buffer must hold n² values");
        let plan = if inverse { &self.inverse } else { &self.forward };
        plan.process(data);
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            plan.process(&mut col);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
    }

    /// Forward DFT evaluated only on the frequency columns listed in `cols`
    /// (indices mod n); other columns are left with row transforms only.
    pub fn forward_columns(&self, data: &mut [Complex64], cols: &[usize], scratch: &mut Vec<Complex64>) {
        let n = self.n;
        self.forward.process(data);
        scratch.resize(n, Complex64::new(0.0, 0.0));
        for &j in cols {
            for i in 0..n {
                scratch[i] = data[i * n + j];
            }
            self.forward.process(scratch);
            for i in 0..n {
                data[i * n + j] = scratch[i];
            }
        }
    }
}

/// In-place 2D DFT of a row-major `n × n` array; `inverse` uses the
/// unnormalized positive-exponent transform.
pub fn fft2(n: usize, data: &mut [Complex64], inverse: bool) {
    Fft2Plan::new(n).process(data, inverse);
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    n: usize,
    /// Row-major; node `(i, j)` sits at `(i/n, j/n)`.
    values: Vec<f64>,
    spectral: Option<TrigPoly>,
    mean_zero: bool,
}

impl GridField {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 4 || values.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "grid of size {n} needs n >= 4 and n² values (got {})",
                values.len()
            )));
        }
        Ok(Self {
            n,
            values,
            spectral: None,
            mean_zero: false,
        })
    }

    pub fn from_fn(n: usize, f: impl Fn(TorusPoint) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64)));
            }
        }
        Self {
            n,
            values,
            spectral: None,
            mean_zero: false,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
            spectral: None,
            mean_zero: true,
        }
    }

    /// Samples `poly` on the grid and keeps it for spectral evaluation.
    pub fn from_trig(poly: TrigPoly, n: usize) -> Self {
        let values = poly.sample(n);
        let mean_zero = poly.constant() == 0.0;
        Self {
            n,
            values,
            spectral: Some(poly),
            mean_zero,
        }
    }

    /// Attaches the DFT truncation at `cutoff`; exact for fields bandlimited
    /// to `cutoff < n/2`.
    pub fn with_spectral(mut self, cutoff: usize) -> Result<Self> {
        self.spectral = Some(TrigPoly::from_samples(self.n, &self.values, cutoff)?);
        Ok(self)
    }

    pub fn without_spectral(mut self) -> Self {
        self.spectral = None;
        self
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[(i % self.n) * self.n + (j % self.n)]
    }

    pub fn spectral(&self) -> Option<&TrigPoly> {
        self.spectral.as_ref()
    }

    pub fn frequency_cutoff(&self) -> Option<usize> {
        self.spectral.as_ref().map(|s| s.cutoff())
    }

    pub fn is_mean_zero(&self) -> bool {
        self.mean_zero
    }

    pub fn mean(&self) -> f64 {
        crate::stats::mean(&self.values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Subtracts the grid mean (and the constant term of the spectral part).
    pub fn mean_zeroed(mut self) -> Self {
        let m = self.mean();
        for v in &mut self.values {
            *v -= m;
        }
        if let Some(s) = &mut self.spectral {
            s.set_constant(s.constant() - m);
        }
        self.mean_zero = true;
        self
    }

    pub fn eval(&self, p: TorusPoint) -> f64 {
        match &self.spectral {
            Some(s) => s.eval(p),
            None => self.eval_cubic(p),
        }
    }

    pub fn eval_cubic(&self, p: TorusPoint) -> f64 {
        let n = self.n;
        let (i0, wx) = periodic_cubic_weights(p.x1(), n);
        let (j0, wy) = periodic_cubic_weights(p.x2(), n);
        let mut acc = 0.0;
        for (a, wa) in wx.iter().enumerate() {
            let row = ((i0 + a) % n) * n;
            let mut r = 0.0;
            for (b, wb) in wy.iter().enumerate() {
                r += wb * self.values[row + (j0 + b) % n];
            }
            acc += wa * r;
        }
        acc
    }

    /// Pointwise map of the node values; the spectral part is dropped.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField {
        GridField {
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
            spectral: None,
            mean_zero: false,
        }
    }

    pub fn sup_distance(&self, other: &GridField) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::InvalidArgument("grid sizes differ".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "GRIDFIELD 1")?;
        writeln!(w, "n {}", self.n)?;
        match self.frequency_cutoff() {
            Some(c) => writeln!(w, "frequency_cutoff {c}")?,
            None => writeln!(w, "frequency_cutoff none")?,
        }
        writeln!(w, "mean_zero {}", self.mean_zero)?;
        writeln!(w, "end")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        let mut next = |r: &mut dyn BufRead| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse("truncated GridField header".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next(r)? != "GRIDFIELD 1" {
            return Err(Error::Parse("not a GridField file (bad magic line)".into()));
        }
        let mut n = None;
        let mut cutoff = None;
        let mut mean_zero = false;
        loop {
            let l = next(r)?;
            if l == "end" {
                break;
            }
            let (key, val) = l
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("bad header line {l:?}")))?;
            match key {
                "n" => n = Some(val.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?),
                "frequency_cutoff" => {
                    cutoff = match val {
                        "none" => None,
                        v => Some(v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?),
                    }
                }
                "mean_zero" => {
                    mean_zero = val.parse::<bool>().map_err(|e| Error::Parse(e.to_string()))?
                }
                other => return Err(Error::Parse(format!("unknown header key {other:?}"))),
            }
        }
        let n = n.ok_or_else(|| Error::Parse("missing n".into()))?;
        let mut bytes = vec![0u8; n * n * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut field = GridField::from_values(n, values)?;
        field.mean_zero = mean_zero;
        if let Some(c) = cutoff {
            field = field.with_spectral(c)?;
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}
