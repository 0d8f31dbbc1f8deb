//! Value-function Lipschitz constants over every reachable path.
//!
//! `L_H = 0` and, for `t < H`,
//! `L_t(p) = max_{s ∈ A(last p)} α(p ⊕ s)(ℓ₁ + ℓ₂(σ_{s|p})) + L_{t+1}(p ⊕ s) √(1 + α(p ⊕ s)²)`.
//! Neither α nor σ depends on measurements, so the whole table is filled
//! before planning starts and planners only look entries up.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GppError, Result};
use crate::gp::{Design, GpHyperparams, GridSpec, History, Location};
use crate::reward::RewardSpec;

/// Largest accepted `b^H`.
pub const ENUMERATION_LIMIT: f64 = 1e7;

const CACHE_MAGIC: &[u8; 8] = b"GPPLIPT1";

/// Reachability `A(s)` over an indexed set of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionModel {
    locations: Vec<Location>,
    adjacency: Vec<Vec<usize>>,
}

impl ActionModel {
    pub fn new(locations: Vec<Location>, adjacency: Vec<Vec<usize>>) -> Result<Self> {
        if locations.len() != adjacency.len() {
            return Err(GppError::ActionModel(format!(
                "{} locations but {} adjacency lists",
                locations.len(),
                adjacency.len()
            )));
        }
        for (i, loc) in locations.iter().enumerate() {
            if loc.index != i {
                return Err(GppError::ActionModel(format!(
                    "location at position {i} carries index {}",
                    loc.index
                )));
            }
        }
        for (i, next) in adjacency.iter().enumerate() {
            if next.is_empty() {
                return Err(GppError::ActionModel(format!("location {i} has no actions")));
            }
            if let Some(bad) = next.iter().find(|&&j| j >= locations.len()) {
                return Err(GppError::ActionModel(format!(
                    "location {i} lists unknown neighbour {bad}"
                )));
            }
        }
        let adjacency = adjacency
            .into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Ok(Self {
            locations,
            adjacency,
        })
    }

    /// 4-connected grid moves.
    pub fn grid4(grid: &GridSpec) -> Self {
        Self {
            locations: grid.locations(),
            adjacency: (0..grid.len()).map(|i| grid.neighbors4(i)).collect(),
        }
    }

    /// Every location reachable from every location (including staying put).
    pub fn complete(locations: Vec<Location>) -> Result<Self> {
        let all: Vec<usize> = (0..locations.len()).collect();
        let adjacency = vec![all; locations.len()];
        Self::new(locations, adjacency)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn location(&self, index: usize) -> &Location {
        &self.locations[index]
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn actions(&self, from: usize) -> &[usize] {
        &self.adjacency[from]
    }

    pub fn max_branching(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// How table keys are formed from paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKeying {
    /// The exact location-index sequence.
    #[default]
    Exact,
    /// Sorted multiset plus the final location; paths visiting the same
    /// locations and ending at the same place share an entry.
    Multiset,
}

impl PathKeying {
    pub fn key(&self, path: &[usize]) -> Vec<usize> {
        match self {
            PathKeying::Exact => path.to_vec(),
            PathKeying::Multiset => {
                let Some(&last) = path.last() else {
                    return Vec::new();
                };
                let mut key = path.to_vec();
                key.sort_unstable();
                key.push(last);
                key
            }
        }
    }
}

/// Measurement-free data for one action at one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Successor {
    pub location: usize,
    /// `σ_{s|p}`.
    pub sigma: f64,
    /// `α(p ⊕ s)`.
    pub alpha: f64,
    /// `L_{t+1}(p ⊕ s)`.
    pub next_lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub lipschitz: f64,
    pub successors: Vec<Successor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzTable {
    horizon: usize,
    start: usize,
    keying: PathKeying,
    entries: HashMap<Vec<usize>, TableEntry>,
}

impl LipschitzTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Location the robot occupies at `t = 0`.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn keying(&self) -> PathKeying {
        self.keying
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, path: &[usize]) -> Result<&TableEntry> {
        self.entries
            .get(&self.keying.key(path))
            .ok_or_else(|| GppError::UnknownPath(path.to_vec()))
    }

    /// `L_t(path)`.
    pub fn lookup(&self, path: &[usize]) -> Result<f64> {
        Ok(self.entry(path)?.lipschitz)
    }

    pub fn root_lipschitz(&self) -> f64 {
        self.entries.get(&Vec::new()).map_or(0.0, |e| e.lipschitz)
    }

    pub fn successor(&self, path: &[usize], location: usize) -> Result<&Successor> {
        self.entry(path)?
            .successors
            .iter()
            .find(|s| s.location == location)
            .ok_or_else(|| {
                let mut p = path.to_vec();
                p.push(location);
                GppError::UnknownPath(p)
            })
    }

    /// Current location after following `path` from the start.
    pub fn current_location(&self, path: &[usize]) -> usize {
        path.last().copied().unwrap_or(self.start)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<usize>, &TableEntry)> {
        self.entries.iter()
    }

    /// Writes the table with a fingerprint header (see [`fingerprint`]).
    pub fn write_cache(&self, path: &Path, fingerprint: &[u8; 32]) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(fingerprint);
        for v in [self.horizon as u64, self.start as u64, self.entries.len() as u64] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(match self.keying {
            PathKeying::Exact => 0,
            PathKeying::Multiset => 1,
        });
        let mut keys: Vec<&Vec<usize>> = self.entries.keys().collect();
        keys.sort();
        for key in keys {
            let entry = &self.entries[key];
            buf.extend_from_slice(&(key.len() as u64).to_le_bytes());
            for k in key {
                buf.extend_from_slice(&(*k as u64).to_le_bytes());
            }
            buf.extend_from_slice(&entry.lipschitz.to_le_bytes());
            buf.extend_from_slice(&(entry.successors.len() as u64).to_le_bytes());
            for s in &entry.successors {
                buf.extend_from_slice(&(s.location as u64).to_le_bytes());
                for v in [s.sigma, s.alpha, s.next_lipschitz] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a cached table; `Ok(None)` when the file belongs to a different
    /// fingerprint.
    pub fn read_cache(path: &Path, fingerprint: &[u8; 32]) -> Result<Option<Self>> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        if r.take(8)? != CACHE_MAGIC {
            return Err(GppError::Cache("not a Lipschitz table cache".into()));
        }
        if r.take(32)? != fingerprint {
            return Ok(None);
        }
        let horizon = r.u64()? as usize;
        let start = r.u64()? as usize;
        let count = r.u64()? as usize;
        let keying = match r.take(1)?[0] {
            0 => PathKeying::Exact,
            1 => PathKeying::Multiset,
            k => return Err(GppError::Cache(format!("unknown keying tag {k}"))),
        };
        let mut entries = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u64()? as usize;
            let key = (0..len).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let lipschitz = r.f64()?;
            let n = r.u64()? as usize;
            let mut successors = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                successors.push(Successor {
                    location: r.u64()? as usize,
                    sigma: r.f64()?,
                    alpha: r.f64()?,
                    next_lipschitz: r.f64()?,
                });
            }
            entries.insert(key, TableEntry { lipschitz, successors });
        }
        if r.pos != buf.len() {
            return Err(GppError::Cache("trailing bytes in cache file".into()));
        }
        Ok(Some(Self {
            horizon,
            start,
            keying,
            entries,
        }))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(GppError::Cache("truncated cache file".into()));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// SHA-256 over everything the table depends on: prior locations, start,
/// action model, hyperparameters, horizon, reward kind/params and keying.
pub fn fingerprint(
    history0: &History,
    start: usize,
    actions: &ActionModel,
    horizon: usize,
    hyper: &GpHyperparams,
    reward: &RewardSpec,
    keying: PathKeying,
) -> [u8; 32] {
    let mut h = Sha256::new();
    for loc in history0.locations() {
        h.update(loc.x.to_le_bytes());
        h.update(loc.y.to_le_bytes());
        h.update((loc.index as u64).to_le_bytes());
    }
    h.update(b"|start");
    h.update((start as u64).to_le_bytes());
    for (loc, next) in actions.locations.iter().zip(&actions.adjacency) {
        h.update(loc.x.to_le_bytes());
        h.update(loc.y.to_le_bytes());
        h.update((next.len() as u64).to_le_bytes());
        for j in next {
            h.update((*j as u64).to_le_bytes());
        }
    }
    h.update(b"|hyper");
    for v in [
        hyper.prior_mean,
        hyper.signal_variance,
        hyper.noise_variance,
        hyper.length_scales[0],
        hyper.length_scales[1],
    ] {
        h.update(v.to_le_bytes());
    }
    h.update((horizon as u64).to_le_bytes());
    h.update(reward.kind().as_str().as_bytes());
    for (k, v) in reward.params() {
        h.update(k.as_bytes());
        h.update(v.to_le_bytes());
    }
    h.update([keying as u8]);
    h.finalize().into()
}

/// Fills the table for every path of length `0..=H` reachable from `start`.
pub fn precompute(
    history0: &History,
    start: usize,
    actions: &ActionModel,
    horizon: usize,
    hyper: &GpHyperparams,
    reward: &RewardSpec,
) -> Result<LipschitzTable> {
    precompute_with(history0, start, actions, horizon, hyper, reward, PathKeying::Exact)
}

pub fn precompute_with(
    history0: &History,
    start: usize,
    actions: &ActionModel,
    horizon: usize,
    hyper: &GpHyperparams,
    reward: &RewardSpec,
    keying: PathKeying,
) -> Result<LipschitzTable> {
    if horizon == 0 {
        return Err(GppError::InvalidParam("horizon must be at least 1".into()));
    }
    if start >= actions.len() {
        return Err(GppError::ActionModel(format!("start {start} is not in the domain")));
    }
    let b = actions.max_branching() as f64;
    let paths = b.powi(horizon as i32);
    if paths > ENUMERATION_LIMIT {
        return Err(GppError::Budget(format!(
            "{paths:e} paths for branching {b} over horizon {horizon} exceeds {ENUMERATION_LIMIT:e}; use a smaller horizon"
        )));
    }
    let mut table = LipschitzTable {
        horizon,
        start,
        keying,
        entries: HashMap::new(),
    };
    let mut path = Vec::with_capacity(horizon);
    fill(
        &mut table,
        history0.design(),
        &mut path,
        actions,
        hyper,
        reward,
    )?;
    Ok(table)
}

fn fill(
    table: &mut LipschitzTable,
    design: &Design,
    path: &mut Vec<usize>,
    actions: &ActionModel,
    hyper: &GpHyperparams,
    reward: &RewardSpec,
) -> Result<f64> {
    let key = table.keying.key(path);
    if let Some(entry) = table.entries.get(&key) {
        return Ok(entry.lipschitz);
    }
    if path.len() == table.horizon {
        table.entries.insert(
            key,
            TableEntry {
                lipschitz: 0.0,
                successors: Vec::new(),
            },
        );
        return Ok(0.0);
    }
    let here = table.current_location(path);
    let l1 = reward.l1();
    let mut best = f64::NEG_INFINITY;
    let mut successors = Vec::with_capacity(actions.actions(here).len());
    for &next in actions.actions(here) {
        let pred = design.predict(actions.location(next), hyper);
        let sigma = pred.variance.sqrt();
        let alpha = if design.is_empty() { 0.0 } else { design.alpha(&pred) };
        let child = design.extend(&pred)?;
        path.push(next);
        let next_lipschitz = fill(table, &child, path, actions, hyper, reward)?;
        path.pop();
        let value = alpha * (l1 + reward.l2(sigma)) + next_lipschitz * (1.0 + alpha * alpha).sqrt();
        best = best.max(value);
        successors.push(Successor {
            location: next,
            sigma,
            alpha,
            next_lipschitz,
        });
    }
    table.entries.insert(
        key,
        TableEntry {
            lipschitz: best,
            successors,
        },
    );
    Ok(best)
}

pub fn lookup(table: &LipschitzTable, path: &[usize]) -> Result<f64> {
    table.lookup(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{make_reward, RewardKind};
    use std::collections::BTreeMap;

    fn setup() -> (GpHyperparams, ActionModel, History, RewardSpec) {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.05, [1.0, 1.0]).unwrap();
        let locs = vec![
            Location::new(0.0, 0.0, 0),
            Location::new(0.6, 0.0, 1),
            Location::new(0.0, 0.9, 2),
        ];
        let actions = ActionModel::complete(locs.clone()).unwrap();
        let h0 = History::from_observations(&locs[..1], &[0.3], &hyper).unwrap();
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), 0.2);
        let reward = make_reward(RewardKind::Step, &p).unwrap();
        (hyper, actions, h0, reward)
    }

    #[test]
    fn entries_satisfy_recursion() {
        let (hyper, actions, h0, reward) = setup();
        let table = precompute(&h0, 0, &actions, 3, &hyper, &reward).unwrap();
        assert_eq!(table.len(), 1 + 3 + 9 + 27);
        for (path, entry) in table.iter() {
            if path.len() == 3 {
                assert_eq!(entry.lipschitz, 0.0);
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for s in &entry.successors {
                let mut child = path.clone();
                child.push(s.location);
                assert_eq!(table.lookup(&child).unwrap(), s.next_lipschitz);
                best = best.max(
                    s.alpha * (reward.l1() + reward.l2(s.sigma))
                        + s.next_lipschitz * (1.0 + s.alpha * s.alpha).sqrt(),
                );
            }
            assert!((best - entry.lipschitz).abs() <= 1e-10 * best.max(1.0));
            assert!(entry.lipschitz >= 0.0);
        }
        assert_eq!(table.lookup(&[]).unwrap(), table.root_lipschitz());
        assert!(matches!(table.lookup(&[7]), Err(GppError::UnknownPath(_))));
    }

    #[test]
    fn empty_prior_has_zero_root_alpha() {
        let (hyper, actions, _, reward) = setup();
        let table = precompute(&History::empty(), 0, &actions, 2, &hyper, &reward).unwrap();
        let root = table.entry(&[]).unwrap();
        assert!(root.successors.iter().all(|s| s.alpha == 0.0));
        let expected = root
            .successors
            .iter()
            .map(|s| s.next_lipschitz)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(table.root_lipschitz(), expected);
    }

    #[test]
    fn horizon_growth_is_monotone_and_multiset_agrees() {
        let (hyper, actions, h0, reward) = setup();
        let mut prev = 0.0;
        for h in 1..=4 {
            let exact = precompute(&h0, 0, &actions, h, &hyper, &reward).unwrap();
            assert!(exact.root_lipschitz() >= prev);
            prev = exact.root_lipschitz();
            let merged =
                precompute_with(&h0, 0, &actions, h, &hyper, &reward, PathKeying::Multiset).unwrap();
            assert!(merged.len() <= exact.len());
            assert!((merged.root_lipschitz() - exact.root_lipschitz()).abs() < 1e-9 * prev.max(1.0));
        }
    }

    #[test]
    fn enumeration_guard() {
        let grid = GridSpec::new(10, 10, 1.0).unwrap();
        let actions = ActionModel::grid4(&grid);
        let hyper = GpHyperparams::new(0.0, 1.0, 0.1, [1.0, 1.0]).unwrap();
        let reward = make_reward(RewardKind::Mes, &BTreeMap::new()).unwrap();
        let err = precompute(&History::empty(), 55, &actions, 12, &hyper, &reward).unwrap_err();
        assert!(matches!(err, GppError::Budget(_)));
    }

    #[test]
    fn cache_roundtrip_and_fingerprint_mismatch() {
        let (hyper, actions, h0, reward) = setup();
        let table = precompute(&h0, 0, &actions, 2, &hyper, &reward).unwrap();
        let fp = fingerprint(&h0, 0, &actions, 2, &hyper, &reward, PathKeying::Exact);
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("table.bin");
        table.write_cache(&file, &fp).unwrap();
        assert_eq!(LipschitzTable::read_cache(&file, &fp).unwrap(), Some(table));
        let other = fingerprint(&h0, 0, &actions, 3, &hyper, &reward, PathKeying::Exact);
        assert_ne!(fp, other);
        assert_eq!(LipschitzTable::read_cache(&file, &other).unwrap(), None);
    }

    #[test]
    fn invalid_action_models() {
        let locs = vec![Location::new(0.0, 0.0, 0), Location::new(1.0, 0.0, 1)];
        assert!(ActionModel::new(locs.clone(), vec![vec![1], vec![]]).is_err());
        assert!(ActionModel::new(locs.clone(), vec![vec![1], vec![5]]).is_err());
        let swapped = vec![Location::new(0.0, 0.0, 1), Location::new(1.0, 0.0, 0)];
        assert!(ActionModel::new(swapped, vec![vec![1], vec![0]]).is_err());
        assert!(ActionModel::new(locs, vec![vec![1, 1, 0], vec![0]]).is_ok());
    }
}
