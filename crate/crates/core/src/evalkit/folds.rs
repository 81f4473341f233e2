use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;

/// Participant ids playing each role in one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRoles {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Grouped k-fold split. Fold `i` tests on group `i`, validates on group
/// `(i+1) mod k` and trains on the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    group_of: BTreeMap<String, usize>,
    roles: Vec<FoldRoles>,
}

impl FoldAssignment {
    /// Builds an assignment from explicit role lists without checking them.
    /// Used to model corrupted splits; [`FoldAssignment::validate`] reports overlap.
    pub fn from_parts(k: usize, group_of: BTreeMap<String, usize>, roles: Vec<FoldRoles>) -> Self {
        Self { k, group_of, roles }
    }

    fn from_groups(k: usize, group_of: BTreeMap<String, usize>) -> Self {
        let mut groups = vec![Vec::new(); k];
        for (id, &g) in &group_of {
            groups[g].push(id.clone());
        }
        let roles = (0..k)
            .map(|i| {
                let v = (i + 1) % k;
                let train = (0..k).filter(|&j| j != i && j != v).flat_map(|j| groups[j].iter().cloned()).collect();
                FoldRoles { train, val: groups[v].clone(), test: groups[i].clone() }
            })
            .collect();
        Self { k, group_of, roles }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn roles(&self, fold: usize) -> &FoldRoles {
        &self.roles[fold]
    }

    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.group_of.get(id).copied()
    }

    pub fn participants(&self) -> impl Iterator<Item = &str> {
        self.group_of.keys().map(String::as_str)
    }

    /// Ids assigned to group `g`.
    pub fn group(&self, g: usize) -> Vec<&str> {
        self.group_of.iter().filter(|(_, &v)| v == g).map(|(id, _)| id.as_str()).collect()
    }

    /// Checks that every fold's roles are disjoint.
    pub fn validate(&self) -> Result<(), EvalError> {
        for (i, r) in self.roles.iter().enumerate() {
            let test: BTreeSet<&String> = r.test.iter().collect();
            let val: BTreeSet<&String> = r.val.iter().collect();
            if let Some(id) = r.train.iter().chain(&r.val).find(|id| test.contains(id)) {
                return Err(EvalError::Overlap { fold: i, id: id.clone() });
            }
            if let Some(id) = r.train.iter().find(|id| val.contains(id)) {
                return Err(EvalError::Overlap { fold: i, id: id.clone() });
            }
        }
        Ok(())
    }

    /// SHA-256 over a canonical text rendering, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("k={}\n", self.k));
        for (i, r) in self.roles.iter().enumerate() {
            for (tag, ids) in [("train", &r.train), ("val", &r.val), ("test", &r.test)] {
                h.update(format!("{i}:{tag}:{}\n", ids.join(",")));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Class-stratified grouped split: each class is shuffled by `seed` and
/// dealt round-robin, the dealing position carrying over between classes.
pub fn group_kfold(participants: &[(String, usize)], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidParam(format!("k = {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, class) in participants {
        if !seen.insert(id.as_str()) {
            return Err(EvalError::InvalidParam(format!("duplicate participant {id}")));
        }
        by_class.entry(*class).or_default().push(id);
    }
    if let Some((c, ids)) = by_class.iter().find(|(_, ids)| ids.len() < k) {
        return Err(EvalError::InvalidParam(format!("class {c} has {} < {k} participants", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut group_of = BTreeMap::new();
    let mut next = 0;
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            group_of.insert(id.to_string(), next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment::from_groups(k, group_of))
}
