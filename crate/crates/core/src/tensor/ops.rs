//! Differentiable operations recorded on the tape.
//!
//! Forward values are computed eagerly; each node captures a closure mapping
//! the output gradient to per-parent gradients. Reductions that feed one
//! output element always run as a single serial loop in a canonical order, so
//! results do not depend on thread count. Per-cell scatter sums additionally
//! order their inputs by value, which makes the whole pipeline equivariant
//! under permutation of the input points.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tape::{Node, Tape, Var};
use super::Tensor;

/// Below this many output elements the parallel kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 14;

impl<'t> Var<'t> {
    fn unary(&self, value: Tensor, grad_fn: impl Fn(&Tensor) -> Vec<Tensor> + 'static) -> Var<'t> {
        self.tape.push(Node {
            value,
            parents: vec![self.id],
            grad_fn: Some(Box::new(grad_fn)),
        })
    }

    fn binary(
        &self,
        other: &Var<'t>,
        value: Tensor,
        grad_fn: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        self.tape.push(Node {
            value,
            parents: vec![self.id, other.id],
            grad_fn: Some(Box::new(grad_fn)),
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        a.same_dims(&b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.dims().to_vec(), data)?;
        Ok(self.binary(other, value, |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        a.same_dims(&b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(a.dims().to_vec(), data)?;
        Ok(self.binary(other, value, |g| {
            let neg = Tensor::new(g.dims().to_vec(), g.data().iter().map(|v| -v).collect())
                .expect("negation of finite gradient");
            vec![g.clone(), neg]
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        a.same_dims(&b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.dims().to_vec(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.binary(other, value, move |g| {
            let da = g.data().iter().zip(bc.data()).map(|(g, y)| g * y).collect();
            let db = g.data().iter().zip(ac.data()).map(|(g, x)| g * x).collect();
            vec![
                Tensor::new(g.dims().to_vec(), da).expect("finite grad"),
                Tensor::new(g.dims().to_vec(), db).expect("finite grad"),
            ]
        }))
    }

    /// Elementwise `a * x + b` with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| a * v + b).collect();
        let value = Tensor::new(x.dims().to_vec(), data)?;
        Ok(self.unary(value, move |g| {
            let d = g.data().iter().map(|v| a * v).collect();
            vec![Tensor::new(g.dims().to_vec(), d).expect("finite grad")]
        }))
    }

    pub fn scale(&self, a: f64) -> Result<Var<'t>> {
        self.affine(a, 0.0)
    }

    /// Affine map `x W + b`: the building block of every MLP here.
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    /// Matrix product `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", ad, bd)));
        }
        let (n, k, m) = (ad[0], ad[1], bd[1]);
        let value = Tensor::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m))?;
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.binary(other, value, move |g| {
            // dA = G . B^T, dB = A^T . G; per-output-element serial sums,
            // parallelized over independent rows.
            let gd = g.data();
            let (av, bv) = (ac.data(), bc.data());
            let mut da = vec![0.0; n * k];
            let da_row = |i: usize, row: &mut [f64]| {
                for (j, slot) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for l in 0..m {
                        s += gd[i * m + l] * bv[j * m + l];
                    }
                    *slot = s;
                }
            };
            if n * k >= PAR_THRESHOLD {
                da.par_chunks_mut(k)
                    .enumerate()
                    .for_each(|(i, row)| da_row(i, row));
            } else {
                for (i, row) in da.chunks_mut(k).enumerate() {
                    da_row(i, row);
                }
            }
            let mut db = vec![0.0; k * m];
            let db_row = |j: usize, row: &mut [f64]| {
                for i in 0..n {
                    let aij = av[i * k + j];
                    if aij == 0.0 {
                        continue;
                    }
                    let grow = &gd[i * m..(i + 1) * m];
                    for (slot, gv) in row.iter_mut().zip(grow) {
                        *slot += aij * gv;
                    }
                }
            };
            if k * m * n >= PAR_THRESHOLD * 8 {
                db.par_chunks_mut(m)
                    .enumerate()
                    .for_each(|(j, row)| db_row(j, row));
            } else {
                for (j, row) in db.chunks_mut(m).enumerate() {
                    db_row(j, row);
                }
            }
            vec![
                Tensor::new(vec![n, k], da).expect("finite grad"),
                Tensor::new(vec![k, m], db).expect("finite grad"),
            ]
        }))
    }

    /// Broadcast-add a rank-1 bias over every row of `[n,m]`.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        if x.dims().len() != 2 || b.dims().len() != 1 || x.dims()[1] != b.dims()[0] {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                x.dims(),
                b.dims()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let mut data = x.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += b.data()[j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.binary(bias, value, move |g| {
            let mut db = vec![0.0; m];
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..n {
                    s += g.data()[i * m + j];
                }
                db[j] = s;
            }
            vec![g.clone(), Tensor::new(vec![m], db).expect("finite grad")]
        }))
    }

    /// `[k,m] - [1,m]` with the single row broadcast down the rows.
    pub fn sub_bcast_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let r = row.value();
        if x.dims().len() != 2 || r.dims() != [1, x.dims()[1]] {
            return Err(Error::shape(format!(
                "sub_bcast_row: {:?} - {:?}",
                x.dims(),
                r.dims()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let mut data = x.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] -= r.data()[j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.binary(row, value, move |g| {
            let mut dr = vec![0.0; m];
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..n {
                    s += g.data()[i * m + j];
                }
                dr[j] = -s;
            }
            vec![g.clone(), Tensor::new(vec![1, m], dr).expect("finite grad")]
        }))
    }

    /// `[n,m] * [n,1]` with the column broadcast across the columns.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let c = col.value();
        if x.dims().len() != 2 || c.dims() != [x.dims()[0], 1] {
            return Err(Error::shape(format!(
                "mul_col: {:?} * {:?}",
                x.dims(),
                c.dims()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let mut data = x.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= c.data()[i];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let (xc, cc) = (x.clone(), c.clone());
        Ok(self.binary(col, value, move |g| {
            let mut dx = vec![0.0; n * m];
            let mut dc = vec![0.0; n];
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..m {
                    dx[i * m + j] = g.data()[i * m + j] * cc.data()[i];
                    s += g.data()[i * m + j] * xc.data()[i * m + j];
                }
                dc[i] = s;
            }
            vec![
                Tensor::new(vec![n, m], dx).expect("finite grad"),
                Tensor::new(vec![n, 1], dc).expect("finite grad"),
            ]
        }))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        let x = self.value();
        let data: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(x.dims().to_vec(), data)?;
        let y = value.clone();
        Ok(self.unary(value, move |g| {
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            vec![Tensor::new(g.dims().to_vec(), d).expect("finite grad")]
        }))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let x = self.value();
        let data: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::new(x.dims().to_vec(), data)?;
        let y = value.clone();
        Ok(self.unary(value, move |g| {
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            vec![Tensor::new(g.dims().to_vec(), d).expect("finite grad")]
        }))
    }

    /// Normalized exponential along `axis` of a rank-2 tensor, with
    /// max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let value = softmax_raw(&x, axis)?;
        let y = value.clone();
        Ok(self.unary(value, move |g| {
            // dx = y * (g - sum(g * y) per slice)
            let dims = y.dims().to_vec();
            let (n, m) = (dims[0], dims[1]);
            let mut dx = vec![0.0; n * m];
            let slices: Vec<Vec<usize>> = slice_indices(n, m, axis);
            for idx in &slices {
                let dot: f64 = idx.iter().map(|&f| g.data()[f] * y.data()[f]).sum();
                for &f in idx {
                    dx[f] = y.data()[f] * (g.data()[f] - dot);
                }
            }
            vec![Tensor::new(dims, dx).expect("finite grad")]
        }))
    }

    /// `x - logsumexp(x)` along `axis` of a rank-2 tensor.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 || axis > 1 {
            return Err(Error::shape(format!(
                "log_softmax: dims {:?} axis {axis}",
                x.dims()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let slices = slice_indices(n, m, axis);
        let mut data = vec![0.0; n * m];
        for idx in &slices {
            let max = idx
                .iter()
                .map(|&f| x.data()[f])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + idx
                    .iter()
                    .map(|&f| (x.data()[f] - max).exp())
                    .sum::<f64>()
                    .ln();
            for &f in idx {
                data[f] = x.data()[f] - lse;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let y = value.clone();
        Ok(self.unary(value, move |g| {
            let slices = slice_indices(n, m, axis);
            let mut dx = vec![0.0; n * m];
            for idx in &slices {
                let gsum: f64 = idx.iter().map(|&f| g.data()[f]).sum();
                for &f in idx {
                    dx[f] = g.data()[f] - y.data()[f].exp() * gsum;
                }
            }
            vec![Tensor::new(vec![n, m], dx).expect("finite grad")]
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let x = self.value();
        let value = Tensor::scalar(x.data().iter().sum())?;
        let dims = x.dims().to_vec();
        Ok(self.unary(value, move |g| {
            let gv = g.data()[0];
            let n: usize = dims.iter().product();
            vec![Tensor::new(dims.clone(), vec![gv; n]).expect("finite grad")]
        }))
    }

    /// Column sums of `[k,m]`, shaped `[1,m]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 {
            return Err(Error::shape(format!("sum_rows on rank {}", x.dims().len())));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += x.data()[i * m + j];
            }
        }
        let value = Tensor::new(vec![1, m], data)?;
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                dx[i * m..(i + 1) * m].copy_from_slice(g.data());
            }
            vec![Tensor::new(vec![n, m], dx).expect("finite grad")]
        }))
    }

    /// Channel concatenation `[n,a] ++ [n,b] -> [n,a+b]`.
    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let y = other.value();
        if x.dims().len() != 2 || y.dims().len() != 2 || x.dims()[0] != y.dims()[0] {
            return Err(Error::shape(format!(
                "concat_cols: {:?} ++ {:?}",
                x.dims(),
                y.dims()
            )));
        }
        let (n, a, b) = (x.dims()[0], x.dims()[1], y.dims()[1]);
        let mut data = Vec::with_capacity(n * (a + b));
        for i in 0..n {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let value = Tensor::new(vec![n, a + b], data)?;
        Ok(self.binary(other, value, move |g| {
            let mut dx = vec![0.0; n * a];
            let mut dy = vec![0.0; n * b];
            for i in 0..n {
                let row = &g.data()[i * (a + b)..(i + 1) * (a + b)];
                dx[i * a..(i + 1) * a].copy_from_slice(&row[..a]);
                dy[i * b..(i + 1) * b].copy_from_slice(&row[a..]);
            }
            vec![
                Tensor::new(vec![n, a], dx).expect("finite grad"),
                Tensor::new(vec![n, b], dy).expect("finite grad"),
            ]
        }))
    }

    /// Channel concatenation of grids: `[h,w,a] ++ [h,w,b] -> [h,w,a+b]`.
    pub fn concat_channels(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let y = other.value();
        if x.dims().len() != 3 || y.dims().len() != 3 || x.dims()[..2] != y.dims()[..2] {
            return Err(Error::shape(format!(
                "concat_channels: {:?} ++ {:?}",
                x.dims(),
                y.dims()
            )));
        }
        let (h, w) = (x.dims()[0], x.dims()[1]);
        let (a, b) = (x.dims()[2], y.dims()[2]);
        let cells = h * w;
        let mut data = Vec::with_capacity(cells * (a + b));
        for cell in 0..cells {
            data.extend_from_slice(&x.data()[cell * a..(cell + 1) * a]);
            data.extend_from_slice(&y.data()[cell * b..(cell + 1) * b]);
        }
        let value = Tensor::new(vec![h, w, a + b], data)?;
        Ok(self.binary(other, value, move |g| {
            let mut dx = vec![0.0; cells * a];
            let mut dy = vec![0.0; cells * b];
            for cell in 0..cells {
                let row = &g.data()[cell * (a + b)..(cell + 1) * (a + b)];
                dx[cell * a..(cell + 1) * a].copy_from_slice(&row[..a]);
                dy[cell * b..(cell + 1) * b].copy_from_slice(&row[a..]);
            }
            vec![
                Tensor::new(vec![h, w, a], dx).expect("finite grad"),
                Tensor::new(vec![h, w, b], dy).expect("finite grad"),
            ]
        }))
    }

    /// Select rows by index; indices may repeat.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 {
            return Err(Error::shape(format!(
                "gather_rows on rank {}",
                x.dims().len()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::data(format!(
                "gather_rows: index {bad} out of range {n}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(vec![ids.len(), m], data)?;
        let ids = ids.to_vec();
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; n * m];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..m {
                    dx[i * m + j] += g.data()[r * m + j];
                }
            }
            vec![Tensor::new(vec![n, m], dx).expect("finite grad")]
        }))
    }

    /// Select rows by optional index; `None` produces a zero row.
    pub fn gather_rows_or_zero(&self, ids: &[Option<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 {
            return Err(Error::shape(format!(
                "gather_rows_or_zero on rank {}",
                x.dims().len()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::data(format!(
                "gather_rows_or_zero: index {bad} out of range {n}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * m);
        for id in ids {
            match id {
                Some(i) => data.extend_from_slice(x.row(*i)),
                None => data.extend(std::iter::repeat_n(0.0, m)),
            }
        }
        let value = Tensor::new(vec![ids.len(), m], data)?;
        let ids = ids.to_vec();
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; n * m];
            for (r, id) in ids.iter().enumerate() {
                if let Some(i) = id {
                    for j in 0..m {
                        dx[i * m + j] += g.data()[r * m + j];
                    }
                }
            }
            vec![Tensor::new(vec![n, m], dx).expect("finite grad")]
        }))
    }

    /// Mean of the rows assigned to each segment: rows with `seg[i] == s`
    /// average into output row `s`; `seg[i] < 0` rows are skipped. Every
    /// segment must be non-empty.
    pub fn segment_mean(&self, seg: &[i32], n_seg: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 || seg.len() != x.dims()[0] {
            return Err(Error::shape(format!(
                "segment_mean: {:?} with {} segment ids",
                x.dims(),
                seg.len()
            )));
        }
        let (n, m) = (x.dims()[0], x.dims()[1]);
        let mut counts = vec![0usize; n_seg];
        for &s in seg {
            if s >= 0 {
                let s = s as usize;
                if s >= n_seg {
                    return Err(Error::data(format!("segment id {s} out of range {n_seg}")));
                }
                counts[s] += 1;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("segment {empty} has no members")));
        }
        // Canonical accumulation order: group members per segment, then sum
        // rows ordered by value so permuted inputs sum identically.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_seg];
        for (i, &s) in seg.iter().enumerate() {
            if s >= 0 {
                members[s as usize].push(i);
            }
        }
        let mut data = vec![0.0; n_seg * m];
        for (s, list) in members.iter_mut().enumerate() {
            list.sort_by(|&a, &b| cmp_rows(x.row(a), x.row(b)));
            for &i in list.iter() {
                for j in 0..m {
                    data[s * m + j] += x.data()[i * m + j];
                }
            }
            let inv = 1.0 / counts[s] as f64;
            for j in 0..m {
                data[s * m + j] *= inv;
            }
        }
        let value = Tensor::new(vec![n_seg, m], data)?;
        let seg = seg.to_vec();
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; n * m];
            for (i, &s) in seg.iter().enumerate() {
                if s >= 0 {
                    let s = s as usize;
                    let inv = 1.0 / counts[s] as f64;
                    for j in 0..m {
                        dx[i * m + j] = g.data()[s * m + j] * inv;
                    }
                }
            }
            vec![Tensor::new(vec![n, m], dx).expect("finite grad")]
        }))
    }

    /// Max over consecutive blocks of `group` rows: `[n*group, m] -> [n, m]`.
    /// Ties route the gradient to the first maximal row of the block.
    pub fn max_over_groups(&self, group: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 || group == 0 || x.dims()[0] % group != 0 {
            return Err(Error::shape(format!(
                "max_over_groups: {:?} by {group}",
                x.dims()
            )));
        }
        let (rows, m) = (x.dims()[0], x.dims()[1]);
        let n = rows / group;
        let mut data = vec![f64::NEG_INFINITY; n * m];
        let mut argmax = vec![0usize; n * m];
        for b in 0..n {
            for r in 0..group {
                let row = b * group + r;
                for j in 0..m {
                    let v = x.data()[row * m + j];
                    if v > data[b * m + j] {
                        data[b * m + j] = v;
                        argmax[b * m + j] = row;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; rows * m];
            for b in 0..n {
                for j in 0..m {
                    dx[argmax[b * m + j] * m + j] += g.data()[b * m + j];
                }
            }
            vec![Tensor::new(vec![rows, m], dx).expect("finite grad")]
        }))
    }

    /// Column-group expansion `[k,h] -> [k,h*gs]`: column `c` of the input
    /// fills columns `c*gs..(c+1)*gs` of the output.
    pub fn repeat_group_cols(&self, gs: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 || gs == 0 {
            return Err(Error::shape(format!(
                "repeat_group_cols: {:?} by {gs}",
                x.dims()
            )));
        }
        let (n, h) = (x.dims()[0], x.dims()[1]);
        let m = h * gs;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for c in 0..h {
                let v = x.data()[i * h + c];
                for u in 0..gs {
                    data[i * m + c * gs + u] = v;
                }
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; n * h];
            for i in 0..n {
                for c in 0..h {
                    let mut s = 0.0;
                    for u in 0..gs {
                        s += g.data()[i * m + c * gs + u];
                    }
                    dx[i * h + c] = s;
                }
            }
            vec![Tensor::new(vec![n, h], dx).expect("finite grad")]
        }))
    }

    /// Scatter point features `[n,d]` onto an `h x w` grid, averaging the
    /// features of points that share a cell; empty cells are zero. Per-cell
    /// sums run in value-sorted order so the result is independent of the
    /// input point order.
    pub fn scatter_mean_grid(
        &self,
        cells: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        if x.dims().len() != 2 || cells.len() != x.dims()[0] {
            return Err(Error::shape(format!(
                "scatter_mean_grid: {:?} with {} cells",
                x.dims(),
                cells.len()
            )));
        }
        let (n, d) = (x.dims()[0], x.dims()[1]);
        if let Some(&(cy, cx)) = cells.iter().find(|&&(cy, cx)| cy >= h || cx >= w) {
            return Err(Error::data(format!(
                "cell ({cy},{cx}) outside {h}x{w} grid"
            )));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); h * w];
        for (i, &(cy, cx)) in cells.iter().enumerate() {
            members[cy * w + cx].push(i);
        }
        let mut data = vec![0.0; h * w * d];
        let mut counts = vec![0usize; h * w];
        for (cell, list) in members.iter_mut().enumerate() {
            if list.is_empty() {
                continue;
            }
            list.sort_by(|&a, &b| cmp_rows(x.row(a), x.row(b)));
            counts[cell] = list.len();
            for &i in list.iter() {
                for j in 0..d {
                    data[cell * d + j] += x.data()[i * d + j];
                }
            }
            let inv = 1.0 / list.len() as f64;
            for j in 0..d {
                data[cell * d + j] *= inv;
            }
        }
        let value = Tensor::new(vec![h, w, d], data)?;
        let cells = cells.to_vec();
        Ok(self.unary(value, move |g| {
            let mut dx = vec![0.0; n * d];
            for (i, &(cy, cx)) in cells.iter().enumerate() {
                let cell = cy * w + cx;
                let inv = 1.0 / counts[cell] as f64;
                for j in 0..d {
                    dx[i * d + j] = g.data()[cell * d + j] * inv;
                }
            }
            vec![Tensor::new(vec![n, d], dx).expect("finite grad")]
        }))
    }

    /// Per-point copy of the containing cell's feature vector:
    /// `[h,w,d] -> [n,d]`.
    pub fn gather_grid(&self, cells: &[(usize, usize)]) -> Result<Var<'t>> {
        let g = self.value();
        if g.dims().len() != 3 {
            return Err(Error::shape(format!(
                "gather_grid on rank {}",
                g.dims().len()
            )));
        }
        let (h, w, d) = (g.dims()[0], g.dims()[1], g.dims()[2]);
        if let Some(&(cy, cx)) = cells.iter().find(|&&(cy, cx)| cy >= h || cx >= w) {
            return Err(Error::data(format!(
                "cell ({cy},{cx}) outside {h}x{w} grid"
            )));
        }
        let n = cells.len();
        let mut data = Vec::with_capacity(n * d);
        for &(cy, cx) in cells {
            let o = (cy * w + cx) * d;
            data.extend_from_slice(&g.data()[o..o + d]);
        }
        let value = Tensor::new(vec![n, d], data)?;
        let cells = cells.to_vec();
        Ok(self.unary(value, move |gr| {
            let mut dg = vec![0.0; h * w * d];
            for (i, &(cy, cx)) in cells.iter().enumerate() {
                let o = (cy * w + cx) * d;
                for j in 0..d {
                    dg[o + j] += gr.data()[i * d + j];
                }
            }
            vec![Tensor::new(vec![h, w, d], dg).expect("finite grad")]
        }))
    }

    /// 2D cross-correlation over `[h,w,cin]` with kernel `[k,k,cin,cout]`
    /// and rank-1 bias, zero padding, stride 1, `k` in {1, 3}.
    pub fn conv2d(&self, kernel: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let ker = kernel.value();
        let b = bias.value();
        let xd = x.dims().to_vec();
        let kd = ker.dims().to_vec();
        if xd.len() != 3 || kd.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: grid {:?} kernel {:?}",
                xd, kd
            )));
        }
        let (h, w, cin) = (xd[0], xd[1], xd[2]);
        let (k, cout) = (kd[0], kd[3]);
        if kd[1] != k || kd[2] != cin {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} vs cin {cin}",
                kd
            )));
        }
        if k != 1 && k != 3 {
            return Err(Error::config(format!(
                "conv2d supports k in {{1,3}}, got {k}"
            )));
        }
        if b.dims() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} vs cout {cout}",
                b.dims()
            )));
        }
        let value = Tensor::new(
            vec![h, w, cout],
            conv2d_forward(x.data(), ker.data(), b.data(), h, w, cin, k, cout),
        )?;
        let (xc, kc) = (x.clone(), ker.clone());
        Ok(self.tape.push(Node {
            value,
            parents: vec![self.id, kernel.id, bias.id],
            grad_fn: Some(Box::new(move |g| {
                let (dx, dk, db) =
                    conv2d_backward(xc.data(), kc.data(), g.data(), h, w, cin, k, cout);
                vec![
                    Tensor::new(vec![h, w, cin], dx).expect("finite grad"),
                    Tensor::new(vec![k, k, cin, cout], dk).expect("finite grad"),
                    Tensor::new(vec![cout], db).expect("finite grad"),
                ]
            })),
        }))
    }

    /// Mean negative log-probability of the target class over rows with a
    /// target; expects log-probabilities (see [`Var::log_softmax`]).
    pub fn nll_mean(&self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let lp = self.value();
        if lp.dims().len() != 2 || targets.len() != lp.dims()[0] {
            return Err(Error::shape(format!(
                "nll_mean: {:?} with {} targets",
                lp.dims(),
                targets.len()
            )));
        }
        let (n, c) = (lp.dims()[0], lp.dims()[1]);
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::data(format!("target class {bad} out of range {c}")));
        }
        let valid = targets.iter().flatten().count();
        if valid == 0 {
            return Err(Error::data("nll_mean: every point is ignored".to_string()));
        }
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= lp.data()[i * c + t];
            }
        }
        let value = Tensor::scalar(total / valid as f64)?;
        let targets = targets.to_vec();
        Ok(self.unary(value, move |g| {
            let gv = g.data()[0];
            let mut d = vec![0.0; n * c];
            for (i, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    d[i * c + t] = -gv / valid as f64;
                }
            }
            vec![Tensor::new(vec![n, c], d).expect("finite grad")]
        }))
    }

    /// Jaccard-loss surrogate on probabilities `[n,c]`: per class present in
    /// `targets`, sorted prediction errors inner-multiplied with the Lovasz
    /// extension gradient of that class's Jaccard loss, averaged over the
    /// present classes. Rows must sum to 1.
    pub fn lovasz_softmax(&self, targets: &[usize]) -> Result<Var<'t>> {
        let p = self.value();
        if p.dims().len() != 2 || targets.len() != p.dims()[0] {
            return Err(Error::shape(format!(
                "lovasz_softmax: {:?} with {} targets",
                p.dims(),
                targets.len()
            )));
        }
        let (n, c) = (p.dims()[0], p.dims()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::data(format!("target class {bad} out of range {c}")));
        }
        for i in 0..n {
            let s: f64 = p.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::data(format!(
                    "lovasz_softmax: row {i} sums to {s}, not 1"
                )));
            }
        }
        let (loss, per_point_grad) = lovasz_forward_backward(p.data(), targets, n, c);
        let value = Tensor::scalar(loss)?;
        Ok(self.unary(value, move |g| {
            let gv = g.data()[0];
            let d = per_point_grad.iter().map(|v| v * gv).collect();
            vec![Tensor::new(vec![n, c], d).expect("finite grad")]
        }))
    }
}

impl Tape {
    /// Vertical stack of rank-2 vars with equal column counts.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of nothing".to_string()));
        }
        let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
        let m = values[0].dims().last().copied().unwrap_or(0);
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for v in &values {
            if v.dims().len() != 2 || v.dims()[1] != m {
                return Err(Error::shape(format!(
                    "concat_rows: inconsistent {:?}",
                    v.dims()
                )));
            }
            rows.push(v.dims()[0]);
            data.extend_from_slice(v.data());
        }
        let total: usize = rows.iter().sum();
        let value = Tensor::new(vec![total, m], data)?;
        Ok(self.push(Node {
            value,
            parents: parts.iter().map(|v| v.id).collect(),
            grad_fn: Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(rows.len());
                let mut offset = 0;
                for &r in &rows {
                    let chunk = g.data()[offset * m..(offset + r) * m].to_vec();
                    out.push(Tensor::new(vec![r, m], chunk).expect("finite grad"));
                    offset += r;
                }
                out
            })),
        }))
    }
}

// --- raw kernels -------------------------------------------------------------

fn sigmoid_scalar(v: f64) -> f64 {
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    // Keep the open-interval contract even in saturation.
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let row_job = |i: usize, out_row: &mut [f64]| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(m).enumerate() {
            row_job(i, row);
        }
    }
    out
}

fn softmax_raw(x: &Tensor, axis: usize) -> Result<Tensor> {
    if x.dims().len() != 2 || axis > 1 {
        return Err(Error::shape(format!(
            "softmax: dims {:?} axis {axis}",
            x.dims()
        )));
    }
    let (n, m) = (x.dims()[0], x.dims()[1]);
    let mut data = vec![0.0; n * m];
    for idx in slice_indices(n, m, axis) {
        let max = idx
            .iter()
            .map(|&f| x.data()[f])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &f in &idx {
            let e = (x.data()[f] - max).exp();
            data[f] = e;
            sum += e;
        }
        for &f in &idx {
            data[f] /= sum;
        }
    }
    Tensor::new(vec![n, m], data)
}

/// Flat index groups for the slices of a rank-2 tensor along `axis`:
/// axis 1 yields one group per row, axis 0 one group per column.
fn slice_indices(n: usize, m: usize, axis: usize) -> Vec<Vec<usize>> {
    if axis == 1 {
        (0..n)
            .map(|i| (0..m).map(|j| i * m + j).collect())
            .collect()
    } else {
        (0..m)
            .map(|j| (0..n).map(|i| i * m + j).collect())
            .collect()
    }
}

/// Total value order over finite f64 rows (lexicographic), with ties left
/// equal; used to canonicalize accumulation order.
fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).expect("finite tensor values") {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn conv2d_forward(
    x: &[f64],
    ker: &[f64],
    bias: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
) -> Vec<f64> {
    let c = k / 2;
    let mut out = vec![0.0; h * w * cout];
    let row_job = |y: usize, out_row: &mut [f64]| {
        for x_ in 0..w {
            for co in 0..cout {
                let mut s = bias[co];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - c as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x_ as isize + kx as isize - c as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let xo = ((sy as usize) * w + sx as usize) * cin;
                        let ko = ((ky * k + kx) * cin) * cout + co;
                        for ci in 0..cin {
                            s += x[xo + ci] * ker[ko + ci * cout];
                        }
                    }
                }
                out_row[x_ * cout + co] = s;
            }
        }
    };
    if h * w * cout >= PAR_THRESHOLD {
        out.par_chunks_mut(w * cout)
            .enumerate()
            .for_each(|(y, row)| row_job(y, row));
    } else {
        for (y, row) in out.chunks_mut(w * cout).enumerate() {
            row_job(y, row);
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    ker: &[f64],
    gout: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = k / 2;
    // dX: for each input cell, gather from the output cells its value fed.
    let mut dx = vec![0.0; h * w * cin];
    let dx_job = |y: usize, dx_row: &mut [f64]| {
        for x_ in 0..w {
            for ci in 0..cin {
                let mut s = 0.0;
                for ky in 0..k {
                    let oy = y as isize - (ky as isize - c as isize);
                    if oy < 0 || oy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = x_ as isize - (kx as isize - c as isize);
                        if ox < 0 || ox >= w as isize {
                            continue;
                        }
                        let go = ((oy as usize) * w + ox as usize) * cout;
                        let ko = ((ky * k + kx) * cin + ci) * cout;
                        for co in 0..cout {
                            s += gout[go + co] * ker[ko + co];
                        }
                    }
                }
                dx_row[x_ * cin + ci] = s;
            }
        }
    };
    if h * w * cin >= PAR_THRESHOLD {
        dx.par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(y, row)| dx_job(y, row));
    } else {
        for (y, row) in dx.chunks_mut(w * cin).enumerate() {
            dx_job(y, row);
        }
    }
    // dK: independent serial reduction per kernel tap.
    let mut dk = vec![0.0; k * k * cin * cout];
    let dk_job = |flat: usize, slot: &mut f64| {
        let co = flat % cout;
        let ci = (flat / cout) % cin;
        let kx = (flat / (cout * cin)) % k;
        let ky = flat / (cout * cin * k);
        let mut s = 0.0;
        for y in 0..h {
            let sy = y as isize + ky as isize - c as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x_ in 0..w {
                let sx = x_ as isize + kx as isize - c as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                s += x[((sy as usize) * w + sx as usize) * cin + ci]
                    * gout[(y * w + x_) * cout + co];
            }
        }
        *slot = s;
    };
    if dk.len() * h * w >= PAR_THRESHOLD {
        dk.par_iter_mut()
            .enumerate()
            .for_each(|(f, slot)| dk_job(f, slot));
    } else {
        for (f, slot) in dk.iter_mut().enumerate() {
            dk_job(f, slot);
        }
    }
    let mut db = vec![0.0; cout];
    for cell in 0..h * w {
        for co in 0..cout {
            db[co] += gout[cell * cout + co];
        }
    }
    (dx, dk, db)
}

/// Lovasz-softmax forward and the gradient w.r.t. the probabilities.
/// Returns `(loss, dloss/dp)` with the mean over present classes applied.
pub(crate) fn lovasz_forward_backward(
    p: &[f64],
    targets: &[usize],
    n: usize,
    c: usize,
) -> (f64, Vec<f64>) {
    let mut present: Vec<usize> = targets.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut grad = vec![0.0; n * c];
    if present.is_empty() {
        return (0.0, grad);
    }
    let inv_classes = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for &cls in &present {
        let (term, g_sorted, order, fg) = lovasz_class_term(p, targets, n, c, cls);
        loss += term;
        for (rank, &i) in order.iter().enumerate() {
            let sign = if fg[i] { -1.0 } else { 1.0 };
            grad[i * c + cls] += inv_classes * sign * g_sorted[rank];
        }
    }
    (loss * inv_classes, grad)
}

/// One class's Lovasz term: sorted errors dotted with the Jaccard-loss
/// extension gradient. Returns the term, the gradient over sorted ranks, the
/// sort order, and the foreground mask.
pub fn lovasz_class_term(
    p: &[f64],
    targets: &[usize],
    n: usize,
    c: usize,
    cls: usize,
) -> (f64, Vec<f64>, Vec<usize>, Vec<bool>) {
    let fg: Vec<bool> = targets.iter().map(|&t| t == cls).collect();
    let errors: Vec<f64> = (0..n)
        .map(|i| {
            if fg[i] {
                1.0 - p[i * c + cls]
            } else {
                p[i * c + cls]
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        errors[b]
            .partial_cmp(&errors[a])
            .expect("finite errors")
            .then(a.cmp(&b))
    });
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut g = vec![0.0; n];
    let mut inter = gts;
    let mut union = gts;
    let mut prev_jac = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if fg[i] {
            inter -= 1.0;
        } else {
            union += 1.0;
        }
        let jac = if union > 0.0 {
            1.0 - inter / union
        } else {
            0.0
        };
        g[rank] = jac - prev_jac;
        prev_jac = jac;
    }
    let term: f64 = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| errors[i] * g[rank])
        .sum();
    (term, g, order, fg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_cases() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.leaf(t(vec![2], vec![0.0, 0.0]));
        let y = x.matmul(&eye).unwrap().add_row(&zero_b).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let zeros = tape.leaf(Tensor::zeros(vec![3, 2]));
        let b = tape.leaf(t(vec![2], vec![0.5, -1.5]));
        let y = zeros.matmul(&eye).unwrap().add_row(&b).unwrap();
        assert_eq!(y.value().data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let tape = Tape::new();
        let a_data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.713).sin()).collect();
        let b_data: Vec<f64> = (0..8).map(|i| (i as f64 * 1.37).cos()).collect();
        let a = tape.leaf(t(vec![3, 4], a_data.clone()));
        let b = tape.leaf(t(vec![4, 2], b_data.clone()));
        let y = a.matmul(&b).unwrap().value();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for l in 0..4 {
                    s += a_data[i * 4 + l] * b_data[l * 2 + j];
                }
                assert!((y.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_closed_form_and_shift_invariance() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![1, 4], vec![2.0; 4]));
        let y = x.softmax(1).unwrap().value();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let x = tape.leaf(t(vec![1, 2], vec![0.0, 3f64.ln()]));
        let y = x.softmax(1).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);

        let x1 = tape.leaf(t(vec![1, 3], vec![0.3, -0.2, 1.4]));
        let x2 = tape.leaf(t(vec![1, 3], vec![0.3 + 7.0, -0.2 + 7.0, 1.4 + 7.0]));
        let y1 = x1.softmax(1).unwrap().value();
        let y2 = x2.softmax(1).unwrap().value();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(t(
            vec![3, 5],
            (0..15).map(|i| (i as f64).sin() * 20.0).collect(),
        ));
        let y = x.softmax(1).unwrap().value();
        for i in 0..3 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn scatter_mean_basic_cases() {
        let tape = Tape::new();
        // one point per cell: cell equals the feature
        let x = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let grid = x
            .scatter_mean_grid(&[(0, 0), (1, 1)], 2, 2)
            .unwrap()
            .value();
        assert_eq!(grid.data()[0..2], [1.0, 2.0]);
        assert_eq!(grid.data()[(3) * 2..(3) * 2 + 2], [3.0, 4.0]);
        // two points same cell: average
        let x = tape.leaf(t(vec![2, 1], vec![1.0, 3.0]));
        let grid = x
            .scatter_mean_grid(&[(0, 0), (0, 0)], 1, 1)
            .unwrap()
            .value();
        assert_eq!(grid.data(), &[2.0]);
    }

    #[test]
    fn scatter_mean_matches_accumulate_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 1000;
        let d = 3;
        let (h, w) = (8, 8);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cells: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
            .collect();
        let tape = Tape::new();
        let x = tape.leaf(t(vec![n, d], data.clone()));
        let grid = x.scatter_mean_grid(&cells, h, w).unwrap().value();
        // oracle: accumulate then divide
        let mut acc = vec![0.0; h * w * d];
        let mut cnt = vec![0usize; h * w];
        for i in 0..n {
            let cell = cells[i].0 * w + cells[i].1;
            cnt[cell] += 1;
            for j in 0..d {
                acc[cell * d + j] += data[i * d + j];
            }
        }
        for cell in 0..h * w {
            if cnt[cell] > 0 {
                for j in 0..d {
                    acc[cell * d + j] /= cnt[cell] as f64;
                }
            }
        }
        for (a, b) in grid.data().iter().zip(&acc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scatter_mean_is_point_order_invariant_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 64;
        let d = 4;
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cells: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..3), rng.random_range(0..3)))
            .collect();
        let tape = Tape::new();
        let x = tape.leaf(t(vec![n, d], data.clone()));
        let g1 = x.scatter_mean_grid(&cells, 3, 3).unwrap().value();
        // reversed point order
        let mut rev_data = Vec::new();
        for i in (0..n).rev() {
            rev_data.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let rev_cells: Vec<(usize, usize)> = cells.iter().rev().copied().collect();
        let xr = tape.leaf(t(vec![n, d], rev_data));
        let g2 = xr.scatter_mean_grid(&rev_cells, 3, 3).unwrap().value();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scatter_gather_composition_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let n = 40;
        let d = 3;
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cells: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..4), rng.random_range(0..4)))
            .collect();
        let tape = Tape::new();
        let x = tape.leaf(t(vec![n, d], data));
        let once = x
            .scatter_mean_grid(&cells, 4, 4)
            .unwrap()
            .gather_grid(&cells)
            .unwrap();
        let twice = once
            .scatter_mean_grid(&cells, 4, 4)
            .unwrap()
            .gather_grid(&cells)
            .unwrap();
        // re-averaging k identical rows re-rounds the last ulp
        for (a, b) in once.value().data().iter().zip(twice.value().data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gather_inverts_single_point_scatter() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let cells = [(0usize, 0usize), (0, 1), (1, 0)];
        let grid = x.scatter_mean_grid(&cells, 2, 2).unwrap();
        let back = grid.gather_grid(&cells).unwrap().value();
        assert_eq!(back.data(), x.value().data());
        // co-located points read the same cell vector
        let y = grid.gather_grid(&[(0, 0), (0, 0)]).unwrap().value();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn conv2d_identity_kernels() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()));
        // k=1 identity channel map
        let eye = tape.leaf(t(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zb = tape.leaf(t(vec![2], vec![0.0; 2]));
        let y = x.conv2d(&eye, &zb).unwrap().value();
        assert_eq!(y.data(), x.value().data());
        // k=3 delta kernel (center tap identity)
        let mut delta = vec![0.0; 3 * 3 * 2 * 2];
        for ci in 0..2 {
            delta[((1 * 3 + 1) * 2 + ci) * 2 + ci] = 1.0;
        }
        let dk = tape.leaf(t(vec![3, 3, 2, 2], delta));
        let y = x.conv2d(&dk, &zb).unwrap().value();
        assert_eq!(y.data(), x.value().data());
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (h, w, cin, cout, k) = (5, 5, 2, 3, 3);
        let x_data: Vec<f64> = (0..h * w * cin)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let k_data: Vec<f64> = (0..k * k * cin * cout)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let b_data: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let x = tape.leaf(t(vec![h, w, cin], x_data.clone()));
        let ker = tape.leaf(t(vec![k, k, cin, cout], k_data.clone()));
        let b = tape.leaf(t(vec![cout], b_data.clone()));
        let y = x.conv2d(&ker, &b).unwrap().value();
        for yy in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut s = b_data[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = yy as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x_data[((sy as usize) * w + sx as usize) * cin + ci]
                                    * k_data[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    assert!((y.data()[(yy * w + xx) * cout + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_unsupported_kernel_size() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 4, 1]));
        let ker = tape.leaf(Tensor::zeros(vec![2, 2, 1, 1]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(x.conv2d(&ker, &b), Err(Error::Config(_))));
    }

    #[test]
    fn segment_mean_and_gather_rows() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![4, 2], vec![1.0, 0.0, 3.0, 0.0, 0.0, 5.0, 0.0, 7.0]));
        let seg = [0, 0, 1, -1];
        let y = x.segment_mean(&seg, 2).unwrap().value();
        assert_eq!(y.row(0), &[2.0, 0.0]);
        assert_eq!(y.row(1), &[0.0, 5.0]);
        // empty segment is a data error
        assert!(matches!(
            x.segment_mean(&[0, 0, 0, 0], 2),
            Err(Error::Data(_))
        ));

        let g = x.gather_rows(&[2, 0, 0]).unwrap().value();
        assert_eq!(g.row(0), &[0.0, 5.0]);
        assert_eq!(g.row(1), &[1.0, 0.0]);
        assert_eq!(g.row(2), &[1.0, 0.0]);

        let z = x.gather_rows_or_zero(&[Some(1), None]).unwrap().value();
        assert_eq!(z.row(0), &[3.0, 0.0]);
        assert_eq!(z.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn max_over_groups_routes_first_max() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![4, 1], vec![1.0, 3.0, 3.0, 2.0]));
        let y = x.max_over_groups(4).unwrap();
        assert_eq!(y.value().data(), &[3.0]);
        let loss = y.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![1, 3], vec![-1000.0, 0.0, 1000.0]));
        let y = x.sigmoid().unwrap().value();
        assert!(y.data()[0] > 0.0);
        assert_eq!(y.data()[1], 0.5);
        assert!(y.data()[2] < 1.0);
    }

    #[test]
    fn nll_mean_closed_forms() {
        let tape = Tape::new();
        // uniform logits over 4 classes -> loss = ln 4
        let x = tape.leaf(Tensor::zeros(vec![3, 4]));
        let lp = x.log_softmax(1).unwrap();
        let loss = lp.nll_mean(&[Some(0), Some(1), Some(3)]).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-12);
        // overwhelming correct logits -> loss ~ 0
        let x = tape.leaf(t(vec![2, 2], vec![50.0, 0.0, 0.0, 50.0]));
        let lp = x.log_softmax(1).unwrap();
        let loss = lp.nll_mean(&[Some(0), Some(1)]).unwrap();
        assert!(loss.item().unwrap() < 1e-6);
        // all ignored is an error
        assert!(matches!(lp.nll_mean(&[None, None]), Err(Error::Data(_))));
    }

    #[test]
    fn repeat_group_cols_layout() {
        let tape = Tape::new();
        let x = tape.leaf(t(vec![1, 2], vec![5.0, 7.0]));
        let y = x.repeat_group_cols(3).unwrap().value();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn concat_rows_and_cols() {
        let tape = Tape::new();
        let a = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let v = tape.concat_rows(&[a, b]).unwrap().value();
        assert_eq!(v.dims(), &[3, 2]);
        assert_eq!(v.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let c = tape.leaf(t(vec![1, 1], vec![9.0]));
        let h = a.concat_cols(&c).unwrap().value();
        assert_eq!(h.dims(), &[1, 3]);
        assert_eq!(h.data(), &[1.0, 2.0, 9.0]);
    }
}
