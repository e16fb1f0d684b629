use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::collar::{sphere_quadrature, DirectionFamily};
use crate::error::Result;
use crate::grid::{GridField, GridGeometry, NodeRole, Stencil};
use crate::linalg::{cident, trapezoid_weights, CMat, CVec, C64};
use crate::manifold::{ChartManifold, Direction, GeodesicPath, PhasePoint};
use crate::transport::{weights_along, ConnectionPair};

pub type PointWeightFn = Arc<dyn Fn(&[f64], &[f64]) -> CMat + Send + Sync>;

/// Where the matrix weight along each curve comes from.
#[derive(Clone)]
pub enum WeightSource {
    Identity(usize),
    Pair(ConnectionPair),
    Field { fiber: usize, w: PointWeightFn },
}

impl WeightSource {
    pub fn fiber(&self) -> usize {
        match self {
            WeightSource::Identity(n) => *n,
            WeightSource::Pair(p) => p.fiber(),
            WeightSource::Field { fiber, .. } => *fiber,
        }
    }

    pub fn along(&self, m: &ChartManifold, path: &GeodesicPath) -> Result<Vec<CMat>> {
        match self {
            WeightSource::Identity(n) => Ok(vec![cident(*n); path.len()]),
            WeightSource::Pair(p) => weights_along(m, p, path),
            WeightSource::Field { w, .. } => Ok((0..path.len()).map(|i| w(path.x_at(i), path.v_at(i))).collect()),
        }
    }
}

/// Functions, or one-form plus function pairs in scattering components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldMode {
    Scalar,
    Pair,
}

/// `Conjugated` evaluates `N_F` on its own argument. `Plain` precomposes with
/// the argument map `e^{−F/x}Q⁻¹`, so it acts on the integrand itself and
/// shares the transform's kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Conjugated,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NfSpec {
    pub s_nodes: usize,
    pub omega_nodes: usize,
    pub trace_step: f64,
    pub mode: FieldMode,
    pub weighting: Weighting,
    /// Overrides the family's `F` in the exponential weight.
    pub f_weight: Option<f64>,
    pub x_floor: f64,
    pub max_exponent: f64,
}

impl Default for NfSpec {
    fn default() -> Self {
        NfSpec {
            s_nodes: 5,
            omega_nodes: 8,
            trace_step: 0.02,
            mode: FieldMode::Scalar,
            weighting: Weighting::Conjugated,
            f_weight: None,
            x_floor: 1e-3,
            max_exponent: 50.0,
        }
    }
}

/// One quadrature node `(s, ω)` at a grid node, with its launch vector.
#[derive(Clone, Debug)]
pub struct FamilyKey {
    pub node: usize,
    pub x: f64,
    pub s: f64,
    pub lambda: f64,
    pub omega: Vec<f64>,
    pub quad: f64,
    pub start: PhasePoint,
}

/// Quadrature keys for every listed node: midpoint rule in `s` over the
/// support of `χ`, sphere quadrature in `ω`; the launch vector `λ∂x + ω·∂y` is
/// normalised to unit speed.
pub fn family_keys(family: &dyn DirectionFamily, nodes: &[(usize, Vec<f64>)], spec: &NfSpec) -> Result<Vec<FamilyKey>> {
    let m = family.manifold();
    let n = m.dim();
    let chi = family.chi();
    let ls = chi.half_width;
    let ds = 2.0 * ls / spec.s_nodes as f64;
    let omegas = sphere_quadrature(n - 2, spec.omega_nodes);
    let mut out = Vec::with_capacity(nodes.len() * spec.s_nodes * omegas.len());
    for (node, z) in nodes {
        let x = family.x_of(z);
        let (dx, dy) = family.fields(z)?;
        for j in 0..spec.s_nodes {
            let s = -ls + (j as f64 + 0.5) * ds;
            let lambda = s * x;
            for (w, wq) in &omegas {
                let v: Vec<f64> = (0..n).map(|i| lambda * dx[i] + w.iter().zip(&dy).map(|(a, e)| a * e[i]).sum::<f64>()).collect();
                out.push(FamilyKey {
                    node: *node,
                    x,
                    s,
                    lambda,
                    omega: w.clone(),
                    quad: ds * wq * chi.eval(s),
                    start: m.normalize(z, &v),
                });
            }
        }
    }
    Ok(out)
}

/// Keys together with their traced chords (entry to exit through the key point).
pub fn local_family_sampler(
    family: &dyn DirectionFamily,
    nodes: &[(usize, Vec<f64>)],
    spec: &NfSpec,
) -> Result<Vec<(FamilyKey, Result<GeodesicPath>)>> {
    let mt = family.manifold().clone().with_step(spec.trace_step);
    let keys = family_keys(family, nodes, spec)?;
    Ok(keys
        .into_par_iter()
        .map(|k| {
            let path = mt.trace_geodesic(&k.start, Direction::Both);
            (k, path)
        })
        .collect())
}

/// Unknown where the node exists, lies in `M` and has `x > x_floor`.
pub fn collar_roles(family: &dyn DirectionFamily, geometry: &GridGeometry, x_floor: f64) -> Vec<NodeRole> {
    let m = family.manifold();
    (0..geometry.len())
        .map(|i| match family.grid_point(&geometry.node_coords(i)) {
            Some(z) if m.rho(&z) >= 0.0 && family.x_of(&z) > x_floor => NodeRole::Unknown,
            _ => NodeRole::Zero,
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct KeyRec {
    node: u32,
    first: u32,
    count: u32,
}

struct KeyBuild {
    node: usize,
    entry: PhasePoint,
    stencils: Vec<Stencil>,
    coefs: Vec<C64>,
    in_coefs: Vec<f64>,
    outer: Vec<C64>,
    out_coef: Vec<f64>,
    clamped: usize,
}

/// Discretized `N = R∘T`: `T` maps a grid field to one value per key (the
/// weighted curve integral), `R` folds key values back onto the grid. Both
/// factors are stored explicitly, so the adjoint is exact.
pub struct NormalOperator {
    pub geometry: GridGeometry,
    pub roles: Vec<NodeRole>,
    pub node_x: Vec<f64>,
    pub node_points: Vec<Option<Vec<f64>>>,
    pub unknown_nodes: Vec<usize>,
    unknown_of: Vec<u32>,
    pub fiber: usize,
    pub block: usize,
    pub spec: NfSpec,
    scale: Vec<f64>,
    keys: Vec<KeyRec>,
    key_s: Vec<f64>,
    entries: Vec<PhasePoint>,
    stencils: Vec<Stencil>,
    coefs: Vec<C64>,
    in_coefs: Vec<f64>,
    outers: Vec<C64>,
    out_coefs: Vec<f64>,
    pub skipped_keys: usize,
    pub clamped_samples: usize,
}

const NONE: u32 = u32::MAX;

impl NormalOperator {
    pub fn build(
        family: &dyn DirectionFamily,
        weight: &WeightSource,
        geometry: GridGeometry,
        roles: Vec<NodeRole>,
        spec: &NfSpec,
    ) -> Result<NormalOperator> {
        let m = family.manifold();
        let n = m.dim();
        let nf = weight.fiber();
        let block = match spec.mode {
            FieldMode::Scalar => 1,
            FieldMode::Pair => n + 1,
        };
        let f_w = spec.f_weight.unwrap_or_else(|| family.weight_f());
        let points: Vec<Option<Vec<f64>>> = (0..geometry.len()).map(|i| family.grid_point(&geometry.node_coords(i))).collect();
        let node_x: Vec<f64> = points.iter().map(|p| p.as_ref().map_or(f64::NAN, |z| family.x_of(z))).collect();
        let mut unknown_of = vec![NONE; geometry.len()];
        let mut unknown_nodes = Vec::new();
        for (i, r) in roles.iter().enumerate() {
            if *r == NodeRole::Unknown && points[i].is_some() {
                unknown_of[i] = unknown_nodes.len() as u32;
                unknown_nodes.push(i);
            }
        }
        let mut scale = vec![0.0; geometry.len() * block];
        for i in 0..geometry.len() {
            let x = node_x[i];
            if !x.is_finite() || (x <= 0.0 && spec.mode == FieldMode::Pair) {
                continue;
            }
            match spec.mode {
                FieldMode::Scalar => scale[i] = 1.0,
                FieldMode::Pair => {
                    scale[i * block] = 1.0 / (x * x);
                    for b in 1..n {
                        scale[i * block + b] = 1.0 / x;
                    }
                    scale[i * block + n] = match spec.weighting {
                        Weighting::Conjugated => 1.0 / x,
                        Weighting::Plain => 1.0,
                    };
                }
            }
        }
        let mut op = NormalOperator {
            geometry,
            roles,
            node_x,
            node_points: Vec::new(),
            unknown_nodes,
            unknown_of,
            fiber: nf,
            block,
            spec: spec.clone(),
            scale,
            keys: Vec::new(),
            key_s: Vec::new(),
            entries: Vec::new(),
            stencils: Vec::new(),
            coefs: Vec::new(),
            in_coefs: Vec::new(),
            outers: Vec::new(),
            out_coefs: Vec::new(),
            skipped_keys: 0,
            clamped_samples: 0,
        };
        // Scalar unknowns below the floor or outside M only fill interpolation cells; they carry no keys.
        let nodes: Vec<(usize, Vec<f64>)> =
            op.unknown_nodes
                .iter()
                .filter(|&&i| op.node_x[i] > spec.x_floor && m.rho(points[i].as_ref().unwrap()) >= 0.0)
                .map(|&i| (i, points[i].clone().unwrap()))
                .collect();
        let mt = m.clone().with_step(spec.trace_step);
        for chunk in nodes.chunks(64) {
            let keys = family_keys(family, chunk, spec)?;
            let built: Vec<Option<KeyBuild>> =
                keys.par_iter().map(|k| op.build_key(family, weight, &mt, k, f_w)).collect::<Result<Vec<_>>>()?;
            for (k, b) in keys.iter().zip(built) {
                match b {
                    None => op.skipped_keys += 1,
                    Some(b) if b.stencils.is_empty() => {}
                    Some(b) => {
                        op.keys.push(KeyRec { node: b.node as u32, first: op.stencils.len() as u32, count: b.stencils.len() as u32 });
                        op.key_s.push(k.s);
                        op.entries.push(b.entry);
                        op.stencils.extend(b.stencils);
                        op.coefs.extend(b.coefs);
                        op.in_coefs.extend(b.in_coefs);
                        op.outers.extend(b.outer);
                        op.out_coefs.extend(b.out_coef);
                        op.clamped_samples += b.clamped;
                    }
                }
            }
        }
        op.node_points = points;
        Ok(op)
    }

    fn build_key(
        &self,
        family: &dyn DirectionFamily,
        weight: &WeightSource,
        mt: &ChartManifold,
        key: &FamilyKey,
        f_w: f64,
    ) -> Result<Option<KeyBuild>> {
        let Ok(path) = mt.trace_geodesic(&key.start, Direction::Both) else {
            return Ok(None);
        };
        let ws = weight.along(mt, &path)?;
        let q = trapezoid_weights(&path.t);
        let nf = self.fiber;
        let block = self.block;
        let conj = self.spec.weighting == Weighting::Conjugated;
        let mut out = KeyBuild {
            node: key.node,
            entry: path.entry_point(),
            stencils: Vec::new(),
            coefs: Vec::new(),
            in_coefs: Vec::new(),
            outer: Vec::with_capacity(nf * nf),
            out_coef: Vec::with_capacity(block),
            clamped: 0,
        };
        let mut corners = Vec::with_capacity(8);
        for i in 0..path.len() {
            let z = path.x_at(i);
            let xt = family.x_of(z);
            if xt <= 0.0 {
                continue;
            }
            let Some(st) = self.geometry.locate(&family.grid_coords(z)) else { continue };
            self.geometry.corners(&st, &mut corners);
            if corners.iter().all(|&(c, _)| self.roles[c] == NodeRole::Zero) {
                continue;
            }
            let mut factor = q[i];
            if conj {
                let mut e = f_w * (1.0 / xt - 1.0 / key.x);
                if e > self.spec.max_exponent {
                    e = self.spec.max_exponent;
                    out.clamped += 1;
                }
                factor *= e.exp();
            }
            let w = &ws[i];
            for r in 0..nf {
                for c in 0..nf {
                    out.coefs.push(w[(r, c)] * factor);
                }
            }
            if block > 1 {
                out.in_coefs.extend(family.grid_velocity(z, path.v_at(i)));
                out.in_coefs.push(1.0);
            }
            out.stencils.push(st);
        }
        let mut s = key.quad;
        match self.spec.mode {
            FieldMode::Scalar => s /= key.x,
            FieldMode::Pair => {}
        }
        if !conj {
            s *= (-f_w / key.x).exp();
        }
        let wk = &ws[path.origin];
        for r in 0..nf {
            for c in 0..nf {
                out.outer.push(wk[(c, r)].conj() * s);
            }
        }
        if block > 1 {
            out.out_coef.push(key.s);
            out.out_coef.extend(&key.omega);
            out.out_coef.push(1.0);
        }
        Ok(Some(out))
    }

    pub fn width(&self) -> usize {
        self.block * self.fiber
    }

    /// Length of unknown and output vectors.
    pub fn len(&self) -> usize {
        self.unknown_nodes.len() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn sample_count(&self) -> usize {
        self.stencils.len()
    }

    /// Node `i` is unknown and has `x ≥ x_inner`.
    pub fn interior(&self, x_inner: f64) -> Vec<bool> {
        (0..self.geometry.len()).map(|i| self.unknown_of[i] != NONE && self.node_x[i] >= x_inner).collect()
    }

    pub fn to_unknown(&self, field: &GridField) -> CVec {
        assert_eq!(field.width(), self.width());
        let w = self.width();
        let mut out = CVec::zeros(self.len());
        for (k, &i) in self.unknown_nodes.iter().enumerate() {
            out.as_mut_slice()[k * w..(k + 1) * w].copy_from_slice(field.node(i));
        }
        out
    }

    pub fn to_field(&self, u: &CVec) -> GridField {
        let w = self.width();
        let mut f = GridField::zeros(self.geometry.clone(), self.block, self.fiber);
        for (k, &i) in self.unknown_nodes.iter().enumerate() {
            f.values.as_mut_slice()[i * w..(i + 1) * w].copy_from_slice(&u.as_slice()[k * w..(k + 1) * w]);
        }
        f
    }

    fn coord_field(&self, u: &CVec, known: Option<&GridField>) -> Vec<C64> {
        let (w, nf, block) = (self.width(), self.fiber, self.block);
        let mut out = vec![C64::new(0.0, 0.0); self.geometry.len() * w];
        for i in 0..self.geometry.len() {
            let src: &[C64] = match self.roles[i] {
                NodeRole::Unknown if self.unknown_of[i] != NONE => {
                    let k = self.unknown_of[i] as usize;
                    &u.as_slice()[k * w..(k + 1) * w]
                }
                NodeRole::Known => match known {
                    Some(f) => f.node(i),
                    None => continue,
                },
                _ => continue,
            };
            for b in 0..block {
                let s = self.scale[i * block + b];
                for r in 0..nf {
                    out[i * w + b * nf + r] = src[b * nf + r] * s;
                }
            }
        }
        out
    }

    /// `T`: one weighted curve integral per key.
    pub fn forward_keys(&self, u: &CVec, known: Option<&GridField>) -> Vec<C64> {
        let coord = self.coord_field(u, known);
        let (w, nf, block) = (self.width(), self.fiber, self.block);
        let mut out = vec![C64::new(0.0, 0.0); self.keys.len() * nf];
        out.par_chunks_mut(nf).zip(self.keys.par_iter()).for_each(|(acc, key)| {
            let mut corners = Vec::with_capacity(8);
            let mut g = vec![C64::new(0.0, 0.0); nf];
            for j in key.first as usize..(key.first + key.count) as usize {
                self.geometry.corners(&self.stencils[j], &mut corners);
                g.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
                for &(node, wt) in &corners {
                    for b in 0..block {
                        let cb = if block > 1 { self.in_coefs[j * block + b] * wt } else { wt };
                        for r in 0..nf {
                            g[r] += coord[node * w + b * nf + r] * cb;
                        }
                    }
                }
                let cm = &self.coefs[j * nf * nf..(j + 1) * nf * nf];
                for r in 0..nf {
                    let mut s = C64::new(0.0, 0.0);
                    for c in 0..nf {
                        s += cm[r * nf + c] * g[c];
                    }
                    acc[r] += s;
                }
            }
        });
        out
    }

    /// `T*`.
    pub fn forward_adjoint(&self, keys: &[C64]) -> CVec {
        let (w, nf, block) = (self.width(), self.fiber, self.block);
        let mut coord = vec![C64::new(0.0, 0.0); self.geometry.len() * w];
        let mut corners = Vec::with_capacity(8);
        let mut g = vec![C64::new(0.0, 0.0); nf];
        for (kk, key) in self.keys.iter().enumerate() {
            let kv = &keys[kk * nf..(kk + 1) * nf];
            for j in key.first as usize..(key.first + key.count) as usize {
                let cm = &self.coefs[j * nf * nf..(j + 1) * nf * nf];
                for c in 0..nf {
                    let mut s = C64::new(0.0, 0.0);
                    for r in 0..nf {
                        s += cm[r * nf + c].conj() * kv[r];
                    }
                    g[c] = s;
                }
                self.geometry.corners(&self.stencils[j], &mut corners);
                for &(node, wt) in &corners {
                    for b in 0..block {
                        let cb = if block > 1 { self.in_coefs[j * block + b] * wt } else { wt };
                        for r in 0..nf {
                            coord[node * w + b * nf + r] += g[r] * cb;
                        }
                    }
                }
            }
        }
        let mut out = CVec::zeros(self.len());
        for (k, &i) in self.unknown_nodes.iter().enumerate() {
            for b in 0..block {
                let s = self.scale[i * block + b];
                for r in 0..nf {
                    out[k * w + b * nf + r] = coord[i * w + b * nf + r] * s;
                }
            }
        }
        out
    }

    /// `R`: folds key values onto the unknown nodes.
    pub fn reduce(&self, keys: &[C64]) -> CVec {
        let (w, nf, block) = (self.width(), self.fiber, self.block);
        let mut out = CVec::zeros(self.len());
        for (kk, key) in self.keys.iter().enumerate() {
            let kv = &keys[kk * nf..(kk + 1) * nf];
            let om = &self.outers[kk * nf * nf..(kk + 1) * nf * nf];
            let base = self.unknown_of[key.node as usize] as usize * w;
            for r in 0..nf {
                let mut s = C64::new(0.0, 0.0);
                for c in 0..nf {
                    s += om[r * nf + c] * kv[c];
                }
                for b in 0..block {
                    let oc = if block > 1 { self.out_coefs[kk * block + b] } else { 1.0 };
                    out[base + b * nf + r] += s * oc;
                }
            }
        }
        out
    }

    /// `R*`.
    pub fn reduce_adjoint(&self, v: &CVec) -> Vec<C64> {
        let (w, nf, block) = (self.width(), self.fiber, self.block);
        let mut out = vec![C64::new(0.0, 0.0); self.keys.len() * nf];
        for (kk, key) in self.keys.iter().enumerate() {
            let om = &self.outers[kk * nf * nf..(kk + 1) * nf * nf];
            let base = self.unknown_of[key.node as usize] as usize * w;
            let mut t = vec![C64::new(0.0, 0.0); nf];
            for (r, tr) in t.iter_mut().enumerate() {
                for b in 0..block {
                    let oc = if block > 1 { self.out_coefs[kk * block + b] } else { 1.0 };
                    *tr += v[base + b * nf + r] * oc;
                }
            }
            for c in 0..nf {
                let mut s = C64::new(0.0, 0.0);
                for r in 0..nf {
                    s += om[r * nf + c].conj() * t[r];
                }
                out[kk * nf + c] = s;
            }
        }
        out
    }

    pub fn apply(&self, u: &CVec) -> CVec {
        self.reduce(&self.forward_keys(u, None))
    }

    pub fn adjoint(&self, v: &CVec) -> CVec {
        self.forward_adjoint(&self.reduce_adjoint(v))
    }

    /// Applies the operator to a whole grid field; non-unknown nodes come back zero.
    pub fn apply_field(&self, f: &GridField) -> GridField {
        self.to_field(&self.apply(&self.to_unknown(f)))
    }

    /// Adds complex Gaussian noise of `rel` times the rms key value.
    pub fn perturb_keys(&self, keys: &[C64], rel: f64, seed: u64) -> Vec<C64> {
        let rms = (keys.iter().map(|z| z.norm_sqr()).sum::<f64>() / keys.len().max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rel * rms / 2f64.sqrt();
        keys.iter()
            .map(|z| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                z + C64::new(a * re, a * im)
            })
            .collect()
    }

    /// Entry point of each key's chord, in storage order.
    pub fn key_entries(&self) -> &[PhasePoint] {
        &self.entries
    }

    pub fn unknown_index(&self, node: usize) -> Option<usize> {
        (self.unknown_of[node] != NONE).then(|| self.unknown_of[node] as usize)
    }

    /// Samples `f` at the unknown nodes.
    pub fn sample_unknown(&self, f: &dyn Fn(&[f64]) -> Vec<C64>) -> CVec {
        let w = self.width();
        let mut out = CVec::zeros(self.len());
        for (k, &i) in self.unknown_nodes.iter().enumerate() {
            let vals = f(self.node_points[i].as_ref().unwrap());
            assert_eq!(vals.len(), w);
            out.as_mut_slice()[k * w..(k + 1) * w].copy_from_slice(&vals);
        }
        out
    }

    /// Exact `diag(N*N)` over the unknowns, for column scaling.
    pub fn diag_normal(&self) -> Vec<f64> {
        let (w, nf, block) = (self.width(), self.fiber, self.block);
        // Keys of one node are stored contiguously.
        let mut groups: Vec<(usize, usize)> = Vec::new();
        for (kk, key) in self.keys.iter().enumerate() {
            match groups.last_mut() {
                Some((start, end)) if self.keys[*start].node == key.node => *end = kk + 1,
                _ => groups.push((kk, kk + 1)),
            }
        }
        let partial: Vec<Vec<(usize, f64)>> = groups
            .par_iter()
            .map(|&(start, end)| {
                // (source column node, source block) -> per output block, N's nf×nf slab.
                let mut acc: std::collections::HashMap<(usize, usize), Vec<CMat>> = std::collections::HashMap::new();
                let mut corners = Vec::with_capacity(8);
                for kk in start..end {
                    let key = &self.keys[kk];
                    let mut local: std::collections::HashMap<(usize, usize), CMat> = std::collections::HashMap::new();
                    for j in key.first as usize..(key.first + key.count) as usize {
                        let cm = &self.coefs[j * nf * nf..(j + 1) * nf * nf];
                        let cmat = CMat::from_fn(nf, nf, |r, c| cm[r * nf + c]);
                        self.geometry.corners(&self.stencils[j], &mut corners);
                        for &(node, wt) in &corners {
                            if self.unknown_of[node] == NONE || self.roles[node] != NodeRole::Unknown {
                                continue;
                            }
                            for b in 0..block {
                                let cb = if block > 1 { self.in_coefs[j * block + b] * wt } else { wt } * self.scale[node * block + b];
                                if cb == 0.0 {
                                    continue;
                                }
                                *local.entry((node, b)).or_insert_with(|| CMat::zeros(nf, nf)) += &cmat * C64::new(cb, 0.0);
                            }
                        }
                    }
                    let om = &self.outers[kk * nf * nf..(kk + 1) * nf * nf];
                    let omat = CMat::from_fn(nf, nf, |r, c| om[r * nf + c]);
                    for (src, m) in local {
                        let folded = &omat * m;
                        let slot = acc.entry(src).or_insert_with(|| vec![CMat::zeros(nf, nf); block]);
                        for (bo, s) in slot.iter_mut().enumerate() {
                            let oc = if block > 1 { self.out_coefs[kk * block + bo] } else { 1.0 };
                            *s += &folded * C64::new(oc, 0.0);
                        }
                    }
                }
                let mut out = Vec::with_capacity(acc.len() * nf);
                for ((node, b), slabs) in acc {
                    let base = self.unknown_of[node] as usize * w + b * nf;
                    for c in 0..nf {
                        let v: f64 = slabs.iter().map(|s| s.column(c).norm_squared()).sum();
                        out.push((base + c, v));
                    }
                }
                out
            })
            .collect();
        let mut diag = vec![0.0; self.len()];
        for part in partial {
            for (i, v) in part {
                diag[i] += v;
            }
        }
        diag
    }

    /// `s` value of each key, in storage order.
    pub fn key_s(&self) -> &[f64] {
        &self.key_s
    }
}
