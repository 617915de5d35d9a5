//! Users grouped by quantizer ID: group centroids, representative members,
//! the cold-start default group, and profile generation per group.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{generate_profile, LlmBackend, Templates};
use crate::ingest::UserId;
use crate::quantizer::GroupCsid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticGroup {
    pub csid: GroupCsid,
    pub members: Vec<UserId>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupProfile {
    pub csid: GroupCsid,
    pub representatives: Vec<UserId>,
    pub profile_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// Representatives per group.
    pub reps_k: usize,
    /// Desired number of occupied group IDs; only reported against.
    pub target_groups: usize,
    /// Profiles are regenerated when more than this fraction of users
    /// changed group since the last run.
    pub profile_refresh_fraction: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            reps_k: 8,
            target_groups: 50,
            profile_refresh_fraction: 0.1,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps_k == 0 {
            return Err(Error::Config("grouping.reps_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.profile_refresh_fraction) {
            return Err(Error::Config("grouping.profile_refresh_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Partitions users by ID; groups come back in ID order.
pub fn build_groups(
    assignments: &BTreeMap<UserId, GroupCsid>,
    reps: &BTreeMap<UserId, Vec<f64>>,
) -> Result<Vec<SemanticGroup>> {
    let mut by_csid: BTreeMap<&GroupCsid, Vec<&UserId>> = BTreeMap::new();
    for (user, csid) in assignments {
        if !reps.contains_key(user) {
            return Err(Error::MissingRepresentation(user.to_string()));
        }
        by_csid.entry(csid).or_default().push(user);
    }
    Ok(by_csid
        .into_iter()
        .map(|(csid, members)| {
            let dim = reps[members[0]].len();
            let mut centroid = vec![0.0; dim];
            for m in &members {
                for (c, v) in centroid.iter_mut().zip(&reps[*m]) {
                    *c += v;
                }
            }
            let n = members.len() as f64;
            centroid.iter_mut().for_each(|c| *c /= n);
            SemanticGroup {
                csid: csid.clone(),
                members: members.into_iter().cloned().collect(),
                centroid,
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` members closest to the centroid, ties by user ID.
pub fn select_representatives(group: &SemanticGroup, reps: &BTreeMap<UserId, Vec<f64>>, k: usize) -> Vec<UserId> {
    let mut ranked: Vec<(f64, &UserId)> = group
        .members
        .iter()
        .filter_map(|u| reps.get(u).map(|v| (sq_dist(v, &group.centroid), u)))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    ranked.into_iter().take(k).map(|(_, u)| u.clone()).collect()
}

/// The largest group, ties by smaller ID.
pub fn default_group(groups: &[SemanticGroup]) -> Result<GroupCsid> {
    groups
        .iter()
        .max_by(|a, b| a.members.len().cmp(&b.members.len()).then_with(|| b.csid.cmp(&a.csid)))
        .map(|g| g.csid.clone())
        .ok_or(Error::EmptyGroups)
}

/// Fraction of users in `new` whose group differs from `old` (including
/// users absent from `old`).
pub fn membership_change(old: &BTreeMap<UserId, GroupCsid>, new: &BTreeMap<UserId, GroupCsid>) -> f64 {
    if new.is_empty() {
        return 0.0;
    }
    let changed = new.iter().filter(|(u, c)| old.get(*u) != Some(*c)).count();
    changed as f64 / new.len() as f64
}

/// Selects representatives and asks the backend for a profile of each
/// group from the representatives' category sequences.
pub fn generate_group_profiles(
    groups: &[SemanticGroup],
    reps: &BTreeMap<UserId, Vec<f64>>,
    k: usize,
    sequences: &dyn Fn(&UserId) -> Vec<String>,
    backend: &dyn LlmBackend,
    templates: &Templates,
) -> Result<Vec<GroupProfile>> {
    let inputs: Vec<(GroupCsid, Vec<UserId>, Vec<Vec<String>>)> = groups
        .iter()
        .map(|g| {
            let r = select_representatives(g, reps, k);
            let seqs = r.iter().map(sequences).collect();
            (g.csid.clone(), r, seqs)
        })
        .collect();
    inputs
        .into_par_iter()
        .map(|(csid, representatives, seqs)| {
            let profile_text = generate_profile(backend, templates, Some(&csid), &seqs)?;
            Ok(GroupProfile {
                csid,
                representatives,
                profile_text,
            })
        })
        .collect()
}

/// `csid<TAB>size<TAB>rep_user_ids<TAB>profile_text` lines.
pub fn group_table_tsv(groups: &[SemanticGroup], profiles: &[GroupProfile]) -> String {
    let by_csid: BTreeMap<&GroupCsid, &GroupProfile> = profiles.iter().map(|p| (&p.csid, p)).collect();
    let mut out = String::new();
    for g in groups {
        let (reps, text) = match by_csid.get(&g.csid) {
            Some(p) => (
                p.representatives.iter().map(UserId::as_str).collect::<Vec<_>>().join(","),
                p.profile_text.replace(['\t', '\n'], " "),
            ),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!("{}\t{}\t{}\t{}\n", g.csid, g.members.len(), reps, text));
    }
    out
}

/// `user_id<TAB>i1-i2-…` lines.
pub fn csid_table_tsv(assignments: &BTreeMap<UserId, GroupCsid>) -> String {
    assignments.iter().map(|(u, c)| format!("{u}\t{c}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uid(s: &str) -> UserId {
        UserId::from(s)
    }

    #[test]
    fn three_users_two_groups() {
        let a = BTreeMap::from([
            (uid("1"), GroupCsid(vec![0, 1])),
            (uid("2"), GroupCsid(vec![0, 0])),
            (uid("3"), GroupCsid(vec![0, 1])),
        ]);
        let r = BTreeMap::from([(uid("1"), vec![1.0, 0.0]), (uid("2"), vec![5.0, 5.0]), (uid("3"), vec![-1.0, 2.0])]);
        let g = build_groups(&a, &r).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].csid, GroupCsid(vec![0, 0]));
        assert_eq!(g[0].centroid, vec![5.0, 5.0]);
        assert_eq!(g[1].members, vec![uid("1"), uid("3")]);
        assert_eq!(g[1].centroid, vec![0.0, 1.0]);
    }

    #[test]
    fn opposite_vectors_cancel() {
        let a = BTreeMap::from([(uid("a"), GroupCsid(vec![1])), (uid("b"), GroupCsid(vec![1]))]);
        let r = BTreeMap::from([(uid("a"), vec![0.3, -2.0]), (uid("b"), vec![-0.3, 2.0])]);
        assert_eq!(build_groups(&a, &r).unwrap()[0].centroid, vec![0.0, 0.0]);
    }

    #[test]
    fn missing_representation_is_an_error() {
        let a = BTreeMap::from([(uid("a"), GroupCsid(vec![1]))]);
        assert!(matches!(build_groups(&a, &BTreeMap::new()), Err(Error::MissingRepresentation(_))));
    }

    #[test]
    fn nearest_members_are_representatives() {
        let g = SemanticGroup {
            csid: GroupCsid(vec![0]),
            members: vec![uid("u1"), uid("u2"), uid("u3")],
            centroid: vec![0.0],
        };
        let r = BTreeMap::from([(uid("u1"), vec![0.1]), (uid("u2"), vec![0.5]), (uid("u3"), vec![-0.2])]);
        assert_eq!(select_representatives(&g, &r, 2), vec![uid("u1"), uid("u3")]);
        assert_eq!(select_representatives(&g, &r, 8).len(), 3);
    }

    #[test]
    fn default_group_rules() {
        let mk = |c: u16, n: usize| SemanticGroup {
            csid: GroupCsid(vec![c]),
            members: (0..n).map(|i| uid(&i.to_string())).collect(),
            centroid: vec![],
        };
        assert_eq!(default_group(&[mk(0, 10), mk(1, 3)]).unwrap(), GroupCsid(vec![0]));
        assert_eq!(default_group(&[mk(4, 3), mk(2, 3)]).unwrap(), GroupCsid(vec![2]));
        assert_eq!(default_group(&[mk(7, 1)]).unwrap(), GroupCsid(vec![7]));
        assert!(matches!(default_group(&[]), Err(Error::EmptyGroups)));
    }

    #[test]
    fn membership_change_fraction() {
        let old = BTreeMap::from([(uid("a"), GroupCsid(vec![0])), (uid("b"), GroupCsid(vec![1]))]);
        let new = BTreeMap::from([
            (uid("a"), GroupCsid(vec![0])),
            (uid("b"), GroupCsid(vec![0])),
            (uid("c"), GroupCsid(vec![0])),
            (uid("d"), GroupCsid(vec![0])),
        ]);
        assert_eq!(membership_change(&old, &new), 0.75);
    }

    proptest! {
        #[test]
        fn partition_and_representative_optimality(
            points in prop::collection::vec((0u16..4, -5.0f64..5.0, -5.0f64..5.0), 1..40),
            k in 1usize..6,
        ) {
            let mut a = BTreeMap::new();
            let mut r = BTreeMap::new();
            for (i, (c, x, y)) in points.iter().enumerate() {
                a.insert(uid(&i.to_string()), GroupCsid(vec![*c]));
                r.insert(uid(&i.to_string()), vec![*x, *y]);
            }
            let groups = build_groups(&a, &r).unwrap();
            prop_assert_eq!(groups.iter().map(|g| g.members.len()).sum::<usize>(), a.len());
            let mut seen = std::collections::BTreeSet::new();
            for g in &groups {
                for m in &g.members {
                    prop_assert!(seen.insert(m.clone()));
                }
                let chosen = select_representatives(g, &r, k);
                prop_assert_eq!(chosen.len(), k.min(g.members.len()));
                let worst = chosen.iter().map(|u| sq_dist(&r[u], &g.centroid)).fold(0.0, f64::max);
                for m in g.members.iter().filter(|m| !chosen.contains(m)) {
                    prop_assert!(sq_dist(&r[m], &g.centroid) >= worst);
                }
            }
        }
    }
}
