//! PCA compression, k-means codebooks and VLAD aggregation.
//!
//! Descriptors are passed as row-major slices with an explicit dimension.
//! All parallel reductions use fixed chunk boundaries and are summed in chunk
//! order, so results do not depend on the thread count.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::scalar::{l2_normalize, sq_dist, Scalar};

pub const PCA_DIM: usize = 64;
pub const CODEBOOK_SIZE: usize = 256;
pub const VLAD_DIM: usize = PCA_DIM * CODEBOOK_SIZE;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-4;

/// Rows per parallel work unit.
const CHUNK: usize = 1024;

fn check_rows<T>(data: &[T], dim: usize, context: &str) -> Result<usize> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::dims(
            context.to_owned(),
            format!("a multiple of {dim}"),
            data.len(),
        ));
    }
    Ok(data.len() / dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<T>,
    /// `out_dim` orthonormal rows of length `in_dim`.
    pub basis: Vec<T>,
    /// Population variance along each basis row, descending.
    pub explained_variance: Vec<T>,
    /// Total population variance of the fitted data.
    pub total_variance: T,
}

/// Top `out_dim` principal directions of the centred rows.
pub fn fit_pca<T: Scalar>(data: &[T], dim: usize, out_dim: usize) -> Result<PcaModel<T>> {
    let n = check_rows(data, dim, "PCA input")?;
    if out_dim == 0 || out_dim > dim {
        return Err(Error::Invalid(format!(
            "PCA output dimension {out_dim} must lie in 1..={dim}"
        )));
    }
    if n <= out_dim {
        return Err(Error::InsufficientData(format!(
            "PCA to {out_dim} dims needs more than {out_dim} samples, got {n}"
        )));
    }

    let partial_sums: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut s = vec![0.0f64; dim];
            for row in chunk.chunks_exact(dim) {
                s.iter_mut()
                    .zip(row)
                    .for_each(|(a, &b)| *a += b.to_f64_lossy());
            }
            s
        })
        .collect();
    let mut mean = vec![0.0f64; dim];
    for s in &partial_sums {
        mean.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let partial_cov: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut c = vec![0.0f64; dim * dim];
            let mut centred = vec![0.0f64; dim];
            for row in chunk.chunks_exact(dim) {
                for (k, (&v, &m)) in row.iter().zip(&mean).enumerate() {
                    centred[k] = v.to_f64_lossy() - m;
                }
                for i in 0..dim {
                    let ci = centred[i];
                    if ci == 0.0 {
                        continue;
                    }
                    let dst = &mut c[i * dim + i..(i + 1) * dim];
                    for (d, &cj) in dst.iter_mut().zip(&centred[i..]) {
                        *d += ci * cj;
                    }
                }
            }
            c
        })
        .collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for c in &partial_cov {
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += c[i * dim + j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total: f64 = (0..dim).map(|i| cov[(i, i)]).sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("PCA input has zero variance".into()));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let mut basis = Vec::with_capacity(out_dim * dim);
    let mut variance = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let col = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude component positive
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.extend(col.iter().map(|&v| T::lit(v * sign)));
        variance.push(T::lit(eig.eigenvalues[k].max(0.0)));
    }
    Ok(PcaModel {
        in_dim: dim,
        out_dim,
        mean: mean.into_iter().map(T::lit).collect(),
        basis,
        explained_variance: variance,
        total_variance: T::lit(total),
    })
}

impl<T: Scalar> PcaModel<T> {
    pub fn basis_row(&self, k: usize) -> &[T] {
        &self.basis[k * self.in_dim..(k + 1) * self.in_dim]
    }

    /// `basis · (x − mean)`.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(Error::dims("PCA input", self.in_dim, x.len()));
        }
        let centred: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        Ok(self
            .basis
            .chunks_exact(self.in_dim)
            .map(|row| crate::scalar::dot(row, &centred))
            .collect())
    }

    /// Projects every row.
    pub fn apply_rows(&self, data: &[T]) -> Result<Vec<T>> {
        check_rows(data, self.in_dim, "PCA input")?;
        let rows: Vec<Vec<T>> = data
            .par_chunks(self.in_dim)
            .map(|r| self.apply(r))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_model(
            path,
            &[
                "SFP1".into(),
                self.in_dim.to_string(),
                self.out_dim.to_string(),
            ],
            self.mean
                .iter()
                .chain(&self.basis)
                .chain(&self.explained_variance)
                .chain(std::iter::once(&self.total_variance))
                .map(|v| v.to_f64_lossy()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ctx = path.display().to_string();
        let mut r = open_model(path)?;
        let f = binfmt::read_header(&mut r, "SFP1", 3, &ctx)?;
        let in_dim: usize = binfmt::parse_field(&f, 1, &ctx)?;
        let out_dim: usize = binfmt::parse_field(&f, 2, &ctx)?;
        if out_dim == 0 || out_dim > in_dim {
            return Err(Error::header(&ctx, "output dimension out of range"));
        }
        let vals = binfmt::read_f64s(&mut r, in_dim + out_dim * in_dim + out_dim + 1, &ctx)?;
        binfmt::expect_eof(&mut r, &ctx)?;
        let mut it = vals.into_iter().map(T::lit);
        Ok(PcaModel {
            in_dim,
            out_dim,
            mean: it.by_ref().take(in_dim).collect(),
            basis: it.by_ref().take(out_dim * in_dim).collect(),
            explained_variance: it.by_ref().take(out_dim).collect(),
            total_variance: it.next().expect("length checked"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub k: usize,
    pub dim: usize,
    /// `k` row-major centers.
    pub centers: Vec<T>,
    /// Inertia after every Lloyd iteration.
    pub inertia: Vec<T>,
    pub seed: u64,
}

impl<T: Scalar> Codebook<T> {
    pub fn center(&self, i: usize) -> &[T] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iterations(&self) -> usize {
        self.inertia.len()
    }

    pub fn final_inertia(&self) -> T {
        self.inertia.last().copied().unwrap_or_else(T::zero)
    }

    /// Index of the nearest center; ties go to the lowest index.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        nearest_center(&self.centers, self.dim, x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_model(
            path,
            &[
                "SFC1".into(),
                self.k.to_string(),
                self.dim.to_string(),
                self.seed.to_string(),
                self.inertia.len().to_string(),
            ],
            self.centers
                .iter()
                .chain(&self.inertia)
                .map(|v| v.to_f64_lossy()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ctx = path.display().to_string();
        let mut r = open_model(path)?;
        let f = binfmt::read_header(&mut r, "SFC1", 5, &ctx)?;
        let k: usize = binfmt::parse_field(&f, 1, &ctx)?;
        let dim: usize = binfmt::parse_field(&f, 2, &ctx)?;
        let seed: u64 = binfmt::parse_field(&f, 3, &ctx)?;
        let iters: usize = binfmt::parse_field(&f, 4, &ctx)?;
        let vals = binfmt::read_f64s(&mut r, k * dim + iters, &ctx)?;
        binfmt::expect_eof(&mut r, &ctx)?;
        let mut it = vals.into_iter().map(T::lit);
        Ok(Codebook {
            k,
            dim,
            centers: it.by_ref().take(k * dim).collect(),
            inertia: it.collect(),
            seed,
        })
    }
}

fn write_model(path: &Path, header: &[String], values: impl Iterator<Item = f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    binfmt::write_header(&mut w, header)
        .and_then(|_| binfmt::write_f64s(&mut w, values))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn open_model(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn nearest_center<T: Scalar>(centers: &[T], dim: usize, x: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Sorts rows lexicographically so that fitting does not depend on input order.
fn canonical_rows<T: Scalar>(data: &[T], dim: usize) -> Vec<T> {
    let mut rows: Vec<&[T]> = data.chunks_exact(dim).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.concat()
}

/// Distances from every row to its nearest center, with the assignment.
fn assign<T: Scalar>(data: &[T], dim: usize, centers: &[T]) -> Vec<(usize, T)> {
    data.par_chunks(dim)
        .map(|row| nearest_center(centers, dim, row))
        .collect()
}

fn kmeans_pp<T: Scalar>(data: &[T], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
    let n = data.len() / dim;
    let first = rng.gen_range(0..n);
    let mut centers = data[first * dim..(first + 1) * dim].to_vec();
    let mut d2: Vec<f64> = data
        .par_chunks(dim)
        .map(|r| sq_dist(r, &centers[..dim]).to_f64_lossy())
        .collect();
    for _ in 1..k {
        let dist = WeightedIndex::new(&d2).map_err(|_| {
            Error::InsufficientData(format!("fewer than {k} distinct descriptors for the codebook"))
        })?;
        let pick = dist.sample(rng);
        let c = data[pick * dim..(pick + 1) * dim].to_vec();
        d2.par_iter_mut()
            .zip(data.par_chunks(dim))
            .for_each(|(d, r)| *d = d.min(sq_dist(r, &c).to_f64_lossy()));
        centers.extend(c);
    }
    Ok(centers)
}

/// k-means++ seeding followed by Lloyd iterations until the relative inertia
/// improvement drops below 1e-4 or 100 iterations have run. A cluster that
/// empties is re-seeded with the point farthest from its center.
pub fn fit_kmeans<T: Scalar>(data: &[T], dim: usize, k: usize, seed: u64) -> Result<Codebook<T>> {
    let n = check_rows(data, dim, "k-means input")?;
    if k == 0 {
        return Err(Error::Invalid("codebook size must be positive".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{k} clusters need at least {k} descriptors, got {n}"
        )));
    }
    let data = canonical_rows(data, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(&data, dim, k, &mut rng)?;
    Ok(lloyd(&data, dim, k, centers, seed))
}

/// Continues Lloyd iterations from an existing codebook on new data.
pub fn refine_kmeans<T: Scalar>(data: &[T], dim: usize, init: &Codebook<T>) -> Result<Codebook<T>> {
    let n = check_rows(data, dim, "k-means input")?;
    if dim != init.dim {
        return Err(Error::dims("k-means refinement", init.dim, dim));
    }
    if n < init.k {
        return Err(Error::InsufficientData(format!(
            "{} clusters need at least {} descriptors, got {n}",
            init.k, init.k
        )));
    }
    let data = canonical_rows(data, dim);
    Ok(lloyd(&data, dim, init.k, init.centers.clone(), init.seed))
}

fn lloyd<T: Scalar>(data: &[T], dim: usize, k: usize, mut centers: Vec<T>, seed: u64) -> Codebook<T> {
    let n = data.len() / dim;
    let mut inertia: Vec<T> = Vec::new();

    for _ in 0..KMEANS_MAX_ITERS {
        let assignment = assign(data, dim, &centers);
        // update step: chunk partial sums reduced in order
        let partials: Vec<(Vec<T>, Vec<usize>)> = data
            .par_chunks(CHUNK * dim)
            .zip(assignment.par_chunks(CHUNK))
            .map(|(rows, asg)| {
                let mut sums = vec![T::zero(); k * dim];
                let mut counts = vec![0usize; k];
                for (row, &(c, _)) in rows.chunks_exact(dim).zip(asg) {
                    counts[c] += 1;
                    sums[c * dim..(c + 1) * dim]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(s, &v)| *s += v);
                }
                (sums, counts)
            })
            .collect();
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (s, c) in &partials {
            sums.iter_mut().zip(s).for_each(|(a, &b)| *a += b);
            counts.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            let dst = &mut centers[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize_lossy(counts[c]);
                dst.iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                    .for_each(|(d, &s)| *d = s * inv);
            } else {
                let far = assignment
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold((0usize, T::neg_infinity()), |best, (i, &(_, d))| {
                        if d > best.1 {
                            (i, d)
                        } else {
                            best
                        }
                    })
                    .0;
                taken[far] = true;
                dst.copy_from_slice(&data[far * dim..(far + 1) * dim]);
                log::debug!("k-means: re-seeded empty cluster {c} from row {far}");
            }
        }
        let total: T = assign(data, dim, &centers)
            .par_chunks(CHUNK)
            .map(|c| c.iter().map(|&(_, d)| d).sum::<T>())
            .collect::<Vec<T>>()
            .into_iter()
            .sum();
        let prev = inertia.last().copied();
        inertia.push(total);
        if let Some(prev) = prev {
            let improvement = (prev - total).to_f64_lossy();
            if improvement <= KMEANS_TOLERANCE * prev.to_f64_lossy().max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    Codebook {
        k,
        dim,
        centers,
        inertia,
        seed,
    }
}

/// Unnormalized VLAD: residuals to the nearest center summed per center slot.
pub fn vlad_accumulate<T: Scalar>(descs: &[T], codebook: &Codebook<T>) -> Result<Vec<T>> {
    let dim = codebook.dim;
    if descs.len() % dim != 0 {
        return Err(Error::dims("VLAD input", format!("a multiple of {dim}"), descs.len()));
    }
    let mut v = vec![T::zero(); codebook.k * dim];
    let assignment = assign(descs, dim, &codebook.centers);
    for (row, &(c, _)) in descs.chunks_exact(dim).zip(&assignment) {
        let center = codebook.center(c);
        v[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(row.iter().zip(center))
            .for_each(|(s, (&x, &m))| *s += x - m);
    }
    Ok(v)
}

/// Signed square root per component, then unit L2 norm. Zero stays zero.
pub fn normalize_vlad<T: Scalar>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = x.signum() * x.abs().sqrt());
    l2_normalize(v);
}

/// Normalized VLAD; an empty descriptor set gives the zero vector.
pub fn vlad_encode<T: Scalar>(descs: &[T], codebook: &Codebook<T>) -> Result<Vec<T>> {
    let mut v = vlad_accumulate(descs, codebook)?;
    if !descs.is_empty() {
        normalize_vlad(&mut v);
    }
    Ok(v)
}
