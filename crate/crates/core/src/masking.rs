//! Unmasked-token index sets: uniform, n-way complementary, overlapping, and
//! structured (time / frequency / time-frequency) masks.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// `round((1 - m_r) * n)`
pub fn unmasked_count(n: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * n as f64).round() as usize
}

/// Sorted, distinct indices of the tokens the encoder sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    unmasked: Vec<usize>,
    total: usize,
    ratio: f64,
}

impl MaskSet {
    /// Builds a mask from arbitrary indices, sorting them and checking range
    /// and uniqueness. The size is not checked against `ratio`; see
    /// [`validate_family`].
    pub fn new(mut unmasked: Vec<usize>, total: usize, ratio: f64) -> Result<Self> {
        unmasked.sort_unstable();
        if unmasked.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Shape("mask indices must be distinct".into()));
        }
        if let Some(&last) = unmasked.last() {
            if last >= total {
                return Err(Error::Shape(format!("mask index {last} out of range 0..{total}")));
            }
        }
        Ok(Self {
            unmasked,
            total,
            ratio,
        })
    }

    pub(crate) fn from_sorted_unchecked(unmasked: Vec<usize>, total: usize, ratio: f64) -> Self {
        Self {
            unmasked,
            total,
            ratio,
        }
    }

    /// Every token visible (`m_r = 0`).
    pub fn full(total: usize) -> Self {
        Self {
            unmasked: (0..total).collect(),
            total,
            ratio: 0.0,
        }
    }

    pub fn unmasked(&self) -> &[usize] {
        &self.unmasked
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.unmasked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unmasked.is_empty()
    }

    /// Complement in ascending order.
    pub fn masked(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total - self.unmasked.len());
        let mut it = self.unmasked.iter().peekable();
        for i in 0..self.total {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

/// The audio and video masks one stream applies to one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub audio: MaskSet,
    pub video: MaskSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructuredMode {
    Time,
    Frequency,
    Tf,
}

impl FromStr for StructuredMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Self::Time),
            "frequency" => Ok(Self::Frequency),
            "tf" => Ok(Self::Tf),
            other => Err(Error::Config(format!(
                "unknown structured mask mode {other:?} (expected time, frequency or tf)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyPolicy {
    Complementary,
    Overlapping,
    Structured(StructuredMode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFamily {
    pub members: Vec<MaskSet>,
    pub policy: FamilyPolicy,
}

fn check_ratio(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Feasibility(format!(
            "masking ratio {ratio} outside [0, 1)"
        )));
    }
    let k = unmasked_count(n, ratio);
    if k == 0 {
        return Err(Error::Feasibility(format!(
            "masking ratio {ratio} leaves no unmasked token out of {n}"
        )));
    }
    Ok(k)
}

fn draw(rng: &mut KeyedRng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = sample(rng.inner(), pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    v.sort_unstable();
    v
}

/// `round((1 - m_r) N)` indices drawn uniformly without replacement.
pub fn uniform_mask(n: usize, ratio: f64, rng: &mut KeyedRng) -> Result<MaskSet> {
    let k = check_ratio(n, ratio)?;
    let all: Vec<usize> = (0..n).collect();
    Ok(MaskSet::from_sorted_unchecked(draw(rng, &all, k), n, ratio))
}

/// `count` pairwise-disjoint masks. The first is uniform over all tokens, each
/// later one uniform over the tokens no earlier member took.
pub fn complementary_family(
    n: usize,
    ratio: f64,
    count: usize,
    rng: &mut KeyedRng,
) -> Result<MaskFamily> {
    let k = check_ratio(n, ratio)?;
    if count == 0 || count * k > n {
        return Err(Error::Feasibility(format!(
            "{count} complementary masks of {k} tokens need n*round((1-m_r)*N) <= N, \
             but {count}*{k} = {} > N = {n} (m_r = {ratio})",
            count * k
        )));
    }
    let mut residual: Vec<usize> = (0..n).collect();
    let mut members = Vec::with_capacity(count);
    for _ in 0..count {
        let picked = draw(rng, &residual, k);
        let taken: BTreeSet<usize> = picked.iter().copied().collect();
        residual.retain(|i| !taken.contains(i));
        members.push(MaskSet::from_sorted_unchecked(picked, n, ratio));
    }
    Ok(MaskFamily {
        members,
        policy: FamilyPolicy::Complementary,
    })
}

/// `count` independent uniform masks.
pub fn overlapping_family(
    n: usize,
    ratio: f64,
    count: usize,
    rng: &mut KeyedRng,
) -> Result<MaskFamily> {
    let members = (0..count)
        .map(|_| uniform_mask(n, ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskFamily {
        members,
        policy: FamilyPolicy::Overlapping,
    })
}

/// Masks whole time columns, frequency rows, or both, on a
/// `grid_h (frequency) x grid_w (time)` token grid.
///
/// The exact unmasked count `round((1 - m_r) N)` is preserved: when it is not
/// a multiple of the line length, the last kept column (or row) is only
/// partially unmasked, with the surviving cells chosen uniformly inside it.
pub fn structured_mask(
    grid_h: usize,
    grid_w: usize,
    mode: StructuredMode,
    ratio: f64,
    rng: &mut KeyedRng,
) -> Result<MaskSet> {
    let n = grid_h * grid_w;
    if n == 0 {
        return Err(Error::Config("empty token grid".into()));
    }
    let k = check_ratio(n, ratio)?;
    let rng = rng.inner();
    let mut rows: Vec<usize> = (0..grid_h).collect();
    let mut cols: Vec<usize> = (0..grid_w).collect();
    rows.shuffle(rng);
    cols.shuffle(rng);

    let (kept_rows, kept_cols) = match mode {
        StructuredMode::Time => (grid_h, k.div_ceil(grid_h)),
        StructuredMode::Frequency => (k.div_ceil(grid_w), grid_w),
        StructuredMode::Tf => {
            let mut kr = ((grid_h as f64) * (1.0 - ratio).sqrt()).round() as usize;
            kr = kr.clamp(1, grid_h);
            let mut kc = k.div_ceil(kr);
            if kc > grid_w {
                kr = k.div_ceil(grid_w);
                kc = k.div_ceil(kr);
            }
            (kr, kc)
        }
    };
    let rows = &rows[..kept_rows];
    let cols = &cols[..kept_cols];

    let mut unmasked = Vec::with_capacity(k);
    match mode {
        StructuredMode::Frequency => {
            // whole rows, the last kept row partially
            let (last, full) = rows.split_last().unwrap();
            for &r in full {
                unmasked.extend(cols.iter().map(|&c| r * grid_w + c));
            }
            let need = k - unmasked.len();
            let picks = sample(rng, cols.len(), need);
            unmasked.extend(picks.into_iter().map(|i| last * grid_w + cols[i]));
        }
        StructuredMode::Time | StructuredMode::Tf => {
            let (last, full) = cols.split_last().unwrap();
            for &c in full {
                unmasked.extend(rows.iter().map(|&r| r * grid_w + c));
            }
            let need = k - unmasked.len();
            let picks = sample(rng, rows.len(), need);
            unmasked.extend(picks.into_iter().map(|i| rows[i] * grid_w + last));
        }
    }
    unmasked.sort_unstable();
    debug_assert_eq!(unmasked.len(), k);
    Ok(MaskSet::from_sorted_unchecked(unmasked, n, ratio))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub member: usize,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "member {}: {}", self.member, self.detail)
    }
}

/// Checks size, range, sortedness and (for complementary families)
/// pairwise disjointness.
pub fn validate_family(family: &MaskFamily) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut seen: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    for (i, m) in family.members.iter().enumerate() {
        let want = unmasked_count(m.total, m.ratio);
        if m.unmasked.len() != want {
            out.push(Violation {
                member: i,
                detail: format!("size {} != round((1-m_r)*N) = {want}", m.unmasked.len()),
            });
        }
        if let Some(&bad) = m.unmasked.iter().find(|&&x| x >= m.total) {
            out.push(Violation {
                member: i,
                detail: format!("index {bad} out of range 0..{}", m.total),
            });
        }
        if m.unmasked.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation {
                member: i,
                detail: "indices not strictly ascending".into(),
            });
        }
        if let Some(first) = family.members.first() {
            if m.total != first.total || m.ratio != first.ratio {
                out.push(Violation {
                    member: i,
                    detail: "total or ratio differs from member 0".into(),
                });
            }
        }
        let set: BTreeSet<usize> = m.unmasked.iter().copied().collect();
        if family.policy == FamilyPolicy::Complementary {
            for (j, other) in &seen {
                let shared = set.intersection(other).count();
                if shared > 0 {
                    out.push(Violation {
                        member: i,
                        detail: format!("shares {shared} indices with member {j} (not disjoint)"),
                    });
                }
            }
        }
        seen.push((i, set));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
