use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::numerics::Rng;

/// A partition of head indices `0..n_heads` into non-empty groups.
///
/// Always stored in canonical form: each group sorted ascending and groups
/// ordered by their smallest member, so equal partitions compare equal.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct HeadGrouping {
    groups: Vec<Vec<usize>>,
    assignment: Vec<usize>,
}

impl HeadGrouping {
    pub fn new(groups: Vec<Vec<usize>>, n_heads: usize) -> Result<Self> {
        let mut seen = vec![false; n_heads];
        for g in &groups {
            if g.is_empty() {
                return Err(GqaError::Grouping("empty group".into()));
            }
            for &h in g {
                if h >= n_heads {
                    return Err(GqaError::Grouping(format!("head {h} out of range for {n_heads} heads")));
                }
                if std::mem::replace(&mut seen[h], true) {
                    return Err(GqaError::Grouping(format!("head {h} appears twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GqaError::Grouping(format!("head {missing} is not assigned")));
        }
        Ok(Self::canonical(groups, n_heads))
    }

    /// Builds a grouping whose head count is the total number of members.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = groups.iter().map(Vec::len).sum();
        Self::new(groups, n)
    }

    /// Group id per head; ids need not be contiguous.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (h, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(h);
        }
        Self::canonical(by_label.into_values().collect(), labels.len())
    }

    fn canonical(mut groups: Vec<Vec<usize>>, n_heads: usize) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_unstable_by_key(|g| g[0]);
        let mut assignment = vec![0; n_heads];
        for (gi, g) in groups.iter().enumerate() {
            for &h in g {
                assignment[h] = gi;
            }
        }
        Self { groups, assignment }
    }

    /// Every head in its own group (plain multi-head attention).
    pub fn singletons(n_heads: usize) -> Self {
        Self::canonical((0..n_heads).map(|h| vec![h]).collect(), n_heads)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn n_heads(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, head: usize) -> usize {
        self.assignment[head]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn is_uniform(&self, size: usize) -> bool {
        self.groups.iter().all(|g| g.len() == size)
    }

    pub fn is_singletons(&self) -> bool {
        self.is_uniform(1)
    }

    /// Exchanges the group memberships of heads `a` and `b`.
    pub fn swapped(&self, a: usize, b: usize) -> Self {
        let mut labels = self.assignment.clone();
        labels.swap(a, b);
        Self::from_labels(&labels)
    }

    /// Moves head `a` into the group currently holding `target`.
    pub fn moved(&self, a: usize, target: usize) -> Self {
        let mut labels = self.assignment.clone();
        labels[a] = labels[target];
        Self::from_labels(&labels)
    }
}

impl TryFrom<Vec<Vec<usize>>> for HeadGrouping {
    type Error = GqaError;

    fn try_from(groups: Vec<Vec<usize>>) -> Result<Self> {
        Self::from_groups(groups)
    }
}

impl From<HeadGrouping> for Vec<Vec<usize>> {
    fn from(g: HeadGrouping) -> Self {
        g.groups
    }
}

impl fmt::Debug for HeadGrouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.groups)
    }
}

impl fmt::Display for HeadGrouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.groups)
    }
}

fn check_divisor(n_heads: usize, size: usize) -> Result<()> {
    if size == 0 || n_heads == 0 || n_heads % size != 0 {
        return Err(GqaError::Config(format!(
            "group size {size} does not divide {n_heads} heads"
        )));
    }
    Ok(())
}

/// Adjacent heads in blocks of `size`.
pub fn neighbour_grouping(n_heads: usize, size: usize) -> Result<HeadGrouping> {
    check_divisor(n_heads, size)?;
    let groups = (0..n_heads / size)
        .map(|g| (g * size..(g + 1) * size).collect())
        .collect();
    Ok(HeadGrouping::canonical(groups, n_heads))
}

/// A uniform permutation of the heads chunked into blocks of `size`.
pub fn random_grouping(n_heads: usize, size: usize, rng: &mut Rng) -> Result<HeadGrouping> {
    check_divisor(n_heads, size)?;
    let perm = rng.permutation(n_heads);
    let groups = perm.chunks(size).map(<[usize]>::to_vec).collect();
    Ok(HeadGrouping::canonical(groups, n_heads))
}

/// Number of partitions of `n_heads` into groups of exactly `size`, or `None`
/// on overflow: `n! / ((size!)^(n/size) (n/size)!)`.
pub fn count_equal_partitions(n_heads: usize, size: usize) -> Result<Option<u128>> {
    check_divisor(n_heads, size)?;
    // Smallest remaining head picks size-1 companions from the rest.
    let mut total: u128 = 1;
    let mut remaining = n_heads;
    while remaining > 0 {
        let c = binomial(remaining as u128 - 1, size as u128 - 1);
        total = match c.and_then(|c| total.checked_mul(c)) {
            Some(t) => t,
            None => return Ok(None),
        };
        remaining -= size;
    }
    Ok(Some(total))
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// All partitions into groups of exactly `size`, in lexicographic order of
/// the canonical form. Fails with a budget error above `cap` partitions.
pub fn enumerate_equal_partitions(n_heads: usize, size: usize, cap: u64) -> Result<Vec<HeadGrouping>> {
    let count = count_equal_partitions(n_heads, size)?;
    match count {
        Some(c) if c <= cap as u128 => {}
        Some(c) => return Err(GqaError::Budget { count: c.to_string(), cap }),
        None => return Err(GqaError::Budget { count: "> 2^128".into(), cap }),
    }
    let mut out = Vec::with_capacity(count.unwrap_or(0) as usize);
    let mut used = vec![false; n_heads];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    fill_equal(n_heads, size, &mut used, &mut groups, &mut out);
    Ok(out)
}

fn fill_equal(n: usize, size: usize, used: &mut [bool], groups: &mut Vec<Vec<usize>>, out: &mut Vec<HeadGrouping>) {
    let Some(first) = used.iter().position(|u| !u) else {
        out.push(HeadGrouping::canonical(groups.clone(), n));
        return;
    };
    used[first] = true;
    let mut group = vec![first];
    choose_companions(n, size, first + 1, used, &mut group, groups, out);
    used[first] = false;
}

fn choose_companions(
    n: usize,
    size: usize,
    from: usize,
    used: &mut [bool],
    group: &mut Vec<usize>,
    groups: &mut Vec<Vec<usize>>,
    out: &mut Vec<HeadGrouping>,
) {
    if group.len() == size {
        groups.push(group.clone());
        fill_equal(n, size, used, groups, out);
        groups.pop();
        return;
    }
    for h in from..n {
        if used[h] {
            continue;
        }
        used[h] = true;
        group.push(h);
        choose_companions(n, size, h + 1, used, group, groups, out);
        group.pop();
        used[h] = false;
    }
}

/// All partitions of `n_heads` into exactly `n_groups` non-empty groups
/// (restricted-growth strings).
pub fn enumerate_partitions(n_heads: usize, n_groups: usize) -> Vec<HeadGrouping> {
    fn rec(labels: &mut Vec<usize>, used: usize, n: usize, k: usize, out: &mut Vec<HeadGrouping>) {
        if labels.len() == n {
            if used == k {
                out.push(HeadGrouping::from_labels(labels));
            }
            return;
        }
        // not enough heads left to open the missing groups
        if k - used > n - labels.len() {
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels.push(l);
            rec(labels, used.max(l + 1), n, k, out);
            labels.pop();
        }
    }
    let mut out = Vec::new();
    if n_groups == 0 || n_groups > n_heads {
        return out;
    }
    rec(&mut Vec::with_capacity(n_heads), 0, n_heads, n_groups, &mut out);
    out
}
