//! Seeded synthetic representation pairs with known ground truth.
//!
//! Every generator is a pure function of its arguments: the same spec and
//! seed give bitwise-identical output. Independent random streams are used
//! for sources, weights and noise, so changing the noise level leaves the
//! sources untouched.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{save_matrix, save_stimuli, ActivationTensor, Condition, LoadedMatrix, ResponseMatrix, StimulusSet, Unit};

const STREAM_SOURCE: u64 = 1;
const STREAM_WEIGHTS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_PERM: u64 = 4;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_stimuli: usize,
    pub d_source: usize,
    pub d_target: usize,
    pub noise_sigma: f64,
    pub shared_rank: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_stimuli < 4 {
            return Err(Error::InvalidArgument(format!("n_stimuli = {} must be >= 4", self.n_stimuli)));
        }
        if self.d_source == 0 || self.d_target == 0 {
            return Err(Error::InvalidArgument("d_source and d_target must be positive".into()));
        }
        if self.shared_rank > self.d_source.min(self.d_target) {
            return Err(Error::InvalidArgument(format!(
                "shared_rank = {} exceeds min(d_source, d_target) = {}",
                self.shared_rank,
                self.d_source.min(self.d_target)
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma = {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Noise level giving population per-voxel correlation `r` between the
    /// response and its noiseless signal (signal variance is 1).
    pub fn sigma_for_r(r: f64) -> f64 {
        (1.0 / (r * r) - 1.0).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct LinearPair {
    pub activations: ActivationTensor,
    pub responses: ResponseMatrix,
    /// `d_source × d_target`, rank `shared_rank`, unit-norm columns (zero
    /// when `shared_rank = 0`).
    pub weights: DMatrix<f64>,
}

/// `X ~ N(0, I)`, `Y = X W + σ E`.
///
/// Each column of `W` has unit norm, so every voxel's signal has variance 1
/// and the per-voxel correlation with the signal is `1 / √(1 + σ²)`. `Y` is
/// computed from the single-precision `X` that is returned.
pub fn gen_linear_pair(spec: &SynthSpec) -> Result<LinearPair> {
    spec.validate()?;
    let (n, ds, dt, k) = (spec.n_stimuli, spec.d_source, spec.d_target, spec.shared_rank);
    let x32 = gaussian(n, ds, &mut rng(spec.seed, STREAM_SOURCE)).map(|v| v as f32);
    let x = x32.map(f64::from);

    let mut weights = DMatrix::zeros(ds, dt);
    if k > 0 {
        let mut wr = rng(spec.seed, STREAM_WEIGHTS);
        let a = gaussian(ds, k, &mut wr);
        let b = gaussian(k, dt, &mut wr);
        weights = a * b;
        for mut col in weights.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
    }
    let noise = gaussian(n, dt, &mut rng(spec.seed, STREAM_NOISE));
    let y = &x * &weights + noise * spec.noise_sigma;

    Ok(LinearPair {
        activations: ActivationTensor::new(x32, "synth", Unit::Layer, 0, Condition::Pos)?,
        responses: ResponseMatrix::new(y.map(|v| v as f32), format!("synth-{}", spec.seed), None)?,
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct IsometricPair {
    pub a: DMatrix<f64>,
    /// `b[i] = a[perm[i]] · rotation`.
    pub b: DMatrix<f64>,
    pub perm: Vec<usize>,
    pub rotation: DMatrix<f64>,
}

/// Random orthonormal `d × d` matrix (QR of a Gaussian with sign-fixed R).
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian(d, d, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A Gaussian point cloud and a row-permuted, rotated copy of it.
pub fn gen_isometric_pair(n: usize, d: usize, seed: u64) -> Result<IsometricPair> {
    if n < 3 || d == 0 {
        return Err(Error::InvalidArgument(format!("isometric pair needs n >= 3 and d >= 1, got {n}, {d}")));
    }
    let a = gaussian(n, d, &mut rng(seed, STREAM_SOURCE));
    let rotation = random_rotation(d, &mut rng(seed, STREAM_WEIGHTS));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng(seed, STREAM_PERM));
    let rotated = &a * &rotation;
    let b = DMatrix::from_fn(n, d, |i, j| rotated[(perm[i], j)]);
    Ok(IsometricPair { a, b, perm, rotation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Same row permutation for every column: stimuli lose their features.
    RowShuffle,
    /// Columns reordered; rows keep their feature vectors.
    ColumnShuffle,
    /// Each column gets its own row permutation.
    WithinColumnShuffle,
}

/// Seeded permutation ablation. Metadata is kept; the multiset of values in
/// every column (row shuffles) or row (column shuffle) is unchanged.
pub fn ablate_structure(x: &ActivationTensor, mode: AblationMode, seed: u64) -> Result<ActivationTensor> {
    let data = x.data();
    let (n, d) = data.shape();
    let mut r = rng(seed, STREAM_PERM);
    let out = match mode {
        AblationMode::RowShuffle => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            DMatrix::from_fn(n, d, |i, j| data[(perm[i], j)])
        }
        AblationMode::ColumnShuffle => {
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut r);
            DMatrix::from_fn(n, d, |i, j| data[(i, perm[j])])
        }
        AblationMode::WithinColumnShuffle => {
            let mut out = data.clone();
            let mut perm: Vec<usize> = (0..n).collect();
            for j in 0..d {
                perm.shuffle(&mut r);
                for i in 0..n {
                    out[(i, j)] = data[(perm[i], j)];
                }
            }
            out
        }
    };
    x.with_data(out)
}

/// A synthetic model whose layers carry a shared latent signal with
/// layer-dependent noise, plus subjects whose responses read out the same
/// latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub model_id: String,
    pub n_stimuli: usize,
    pub d_latent: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_subjects: usize,
    pub n_voxels: usize,
    /// Voxels that read out the latent; the remaining ones are pure noise.
    pub n_signal_voxels: usize,
    /// Layer noise at the middle layer (cleanest).
    pub layer_noise_min: f64,
    /// Layer noise at the first and last layers.
    pub layer_noise_max: f64,
    pub subject_noise: f64,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            model_id: "synth".into(),
            n_stimuli: 120,
            d_latent: 8,
            d_model: 32,
            n_layers: 3,
            n_subjects: 3,
            n_voxels: 40,
            n_signal_voxels: 30,
            layer_noise_min: 0.5,
            layer_noise_max: 2.0,
            subject_noise: 1.0,
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_stimuli", self.n_stimuli),
            ("d_latent", self.d_latent),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_subjects", self.n_subjects),
            ("n_voxels", self.n_voxels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("sweep field `{name}` must be positive")));
        }
        if self.n_stimuli < 4 {
            return Err(Error::InvalidArgument("sweep needs at least 4 stimuli".into()));
        }
        if self.n_signal_voxels > self.n_voxels {
            return Err(Error::InvalidArgument(format!(
                "n_signal_voxels = {} exceeds n_voxels = {}",
                self.n_signal_voxels, self.n_voxels
            )));
        }
        for (name, v) in [
            ("layer_noise_min", self.layer_noise_min),
            ("layer_noise_max", self.layer_noise_max),
            ("subject_noise", self.subject_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sweep field `{name}` = {v} must be >= 0")));
            }
        }
        Ok(())
    }

    fn layer_noise(&self, layer: usize) -> f64 {
        let rel = if self.n_layers > 1 {
            layer as f64 / (self.n_layers - 1) as f64
        } else {
            0.5
        };
        self.layer_noise_min + (self.layer_noise_max - self.layer_noise_min) * (2.0 * rel - 1.0).abs()
    }
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub stimuli: StimulusSet,
    /// Layer-major; within a layer the intact (`pos`) tensor precedes its
    /// row-shuffled (`nopos`) ablation.
    pub activations: Vec<ActivationTensor>,
    /// Per subject, the mean of its two split halves.
    pub responses: Vec<ResponseMatrix>,
    /// Per subject, two independent noisy repetitions.
    pub halves: Vec<(ResponseMatrix, ResponseMatrix)>,
}

/// Entry names written by [`Sweep::write`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntries {
    pub activations: Vec<String>,
    pub responses: Vec<String>,
    pub halves: Vec<(String, String)>,
}

impl Sweep {
    pub fn activation_entry_name(t: &ActivationTensor) -> String {
        format!("{}.{}{}.{}", t.model_id, t.unit, t.unit_index, t.condition)
    }

    /// Writes every matrix and the stimulus set into one manifest.
    pub fn write(&self, manifest_path: &Path) -> Result<SweepEntries> {
        save_stimuli(&self.stimuli, manifest_path)?;
        let save = |m: LoadedMatrix, name: String| -> Result<String> {
            save_matrix(&m, manifest_path, &name)?;
            Ok(name)
        };
        let activations = self
            .activations
            .iter()
            .map(|t| save(t.clone().into(), Self::activation_entry_name(t)))
            .collect::<Result<Vec<_>>>()?;
        let responses = self
            .responses
            .iter()
            .map(|r| save(r.clone().into(), format!("resp.{}", r.subject_id)))
            .collect::<Result<Vec<_>>>()?;
        let halves = self
            .halves
            .iter()
            .map(|(a, b)| {
                Ok((
                    save(a.clone().into(), format!("resp.{}.half_a", a.subject_id))?,
                    save(b.clone().into(), format!("resp.{}.half_b", b.subject_id))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepEntries {
            activations,
            responses,
            halves,
        })
    }
}

/// Layer `l` is `Z A_l + τ_l E_l` with `τ_l` smallest at the middle layer;
/// subject `s` has halves `Z B + √2 σ E_s,h` with a readout `B` shared across
/// subjects, so the averaged response carries noise `σ`.
pub fn gen_layer_sweep(spec: &SweepSpec) -> Result<Sweep> {
    spec.validate()?;
    let n = spec.n_stimuli;
    let z = gaussian(n, spec.d_latent, &mut rng(spec.seed, STREAM_SOURCE));
    let mut wr = rng(spec.seed, STREAM_WEIGHTS);
    let mut readout = gaussian(spec.d_latent, spec.n_voxels, &mut wr);
    for (j, mut col) in readout.column_iter_mut().enumerate() {
        if j < spec.n_signal_voxels {
            let norm = col.norm();
            col /= norm;
        } else {
            col.fill(0.0);
        }
    }
    let scale = 1.0 / (spec.d_latent as f64).sqrt();
    let mut activations = Vec::with_capacity(2 * spec.n_layers);
    for layer in 0..spec.n_layers {
        let mixing = gaussian(spec.d_latent, spec.d_model, &mut wr) * scale;
        let mut nr = rng(spec.seed, 100 + layer as u64);
        let noise = gaussian(n, spec.d_model, &mut nr);
        let data = &z * mixing + noise * spec.layer_noise(layer);
        let pos = ActivationTensor::new(data.map(|v| v as f32), spec.model_id.clone(), Unit::Layer, layer, Condition::Pos)?;
        let mut nopos = ablate_structure(&pos, AblationMode::RowShuffle, spec.seed.wrapping_add(layer as u64))?;
        nopos.condition = Condition::Nopos;
        activations.push(pos);
        activations.push(nopos);
    }
    let signal = &z * &readout;
    let half_noise = spec.subject_noise * std::f64::consts::SQRT_2;
    let mut responses = Vec::with_capacity(spec.n_subjects);
    let mut halves = Vec::with_capacity(spec.n_subjects);
    for s in 0..spec.n_subjects {
        let id = format!("sub{:02}", s + 1);
        let mut nr = rng(spec.seed, 10_000 + s as u64);
        let a = (&signal + gaussian(n, spec.n_voxels, &mut nr) * half_noise).map(|v| v as f32);
        let b = (&signal + gaussian(n, spec.n_voxels, &mut nr) * half_noise).map(|v| v as f32);
        let mean = a.zip_map(&b, |x, y| 0.5 * (x + y));
        responses.push(ResponseMatrix::new(mean, id.clone(), None)?);
        halves.push((ResponseMatrix::new(a, id.clone(), None)?, ResponseMatrix::new(b, id, None)?));
    }
    Ok(Sweep {
        stimuli: StimulusSet::numbered(n),
        activations,
        responses,
        halves,
    })
}
