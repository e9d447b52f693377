//! Group machinery: rewrites of a maxent model that leave every conditional
//! distribution unchanged.
//!
//! A *group* is a set of features of which exactly one fires on every
//! candidate; scaling all of its weights by a common factor multiplies every
//! candidate's unnormalized score by that factor, so normalized probabilities
//! do not move. Exclusive sets (at most one member fires) become groups once an
//! anti-indicator with weight 1 is added for the candidates where no member
//! fires.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::maxent::{Candidate, Dataset, EventBlock, FeatureId, MaxentModel};

/// Relative slack applied when scaling groups below one.
pub const SUBUNIT_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    /// Exactly one member fires on every candidate.
    Exact,
    /// At most one member fires on every candidate.
    Exclusive,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub members: Vec<FeatureId>,
    pub kind: GroupKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupPartition {
    pub groups: Vec<Group>,
    pub anti_ids: BTreeSet<FeatureId>,
}

/// Positive scaling constant for [`scale_group`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidScale(alpha))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl GroupPartition {
    pub fn num_features(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn all_exact(&self) -> bool {
        self.groups.iter().all(|g| g.kind == GroupKind::Exact)
    }

    /// Group index of every feature id in `0..num_features`.
    pub fn group_of(&self, num_features: usize) -> Result<Vec<usize>> {
        let mut owner = vec![usize::MAX; num_features];
        for (gi, g) in self.groups.iter().enumerate() {
            for &m in &g.members {
                if m >= num_features {
                    return Err(Error::InvalidPartition(format!(
                        "feature {m} out of range ({num_features} features)"
                    )));
                }
                if owner[m] != usize::MAX {
                    return Err(Error::InvalidPartition(format!("feature {m} appears in two groups")));
                }
                owner[m] = gi;
            }
        }
        if let Some(missing) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::InvalidPartition(format!("feature {missing} is not covered")));
        }
        Ok(owner)
    }

    /// Checks coverage and that each group's kind holds on every candidate of `data`.
    pub fn verify(&self, data: &Dataset) -> Result<()> {
        let owner = self.group_of(data.num_features())?;
        for a in &self.anti_ids {
            if *a >= owner.len() {
                return Err(Error::InvalidPartition(format!("anti-indicator {a} out of range")));
            }
        }
        let mut hits = vec![0usize; self.groups.len()];
        for e in data.events() {
            for c in e.candidates() {
                hits.iter_mut().for_each(|h| *h = 0);
                for &i in c.active() {
                    hits[owner[i]] += 1;
                }
                for (gi, (&h, g)) in hits.iter().zip(&self.groups).enumerate() {
                    let ok = match g.kind {
                        GroupKind::Exact => h == 1,
                        GroupKind::Exclusive => h <= 1,
                    };
                    if !ok {
                        return Err(Error::InvalidPartition(format!(
                            "group {gi} has {h} active members on candidate {:?} of event {:?}",
                            c.label, e.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Whether exactly one member of `members` fires on every candidate of `data`.
pub fn is_exact_group(data: &Dataset, members: &[FeatureId]) -> bool {
    data.events().iter().all(|e| {
        e.candidates()
            .iter()
            .all(|c| members.iter().filter(|&&m| c.contains(m)).count() == 1)
    })
}

fn co_activity(data: &Dataset) -> Vec<BTreeSet<FeatureId>> {
    let mut co = vec![BTreeSet::new(); data.num_features()];
    for e in data.events() {
        for c in e.candidates() {
            let a = c.active();
            for (k, &i) in a.iter().enumerate() {
                for &j in &a[k + 1..] {
                    co[i].insert(j);
                    co[j].insert(i);
                }
            }
        }
    }
    co
}

/// Greedy first-fit partition of feature ids into exclusive sets, in id order.
pub fn partition_exclusive(data: &Dataset) -> GroupPartition {
    let co = co_activity(data);
    let mut sets: Vec<Vec<FeatureId>> = Vec::new();
    for f in 0..data.num_features() {
        match sets.iter_mut().find(|s| s.iter().all(|m| !co[f].contains(m))) {
            Some(s) => s.push(f),
            None => sets.push(vec![f]),
        }
    }
    let groups = sets
        .into_iter()
        .map(|members| {
            let kind = if is_exact_group(data, &members) {
                GroupKind::Exact
            } else {
                GroupKind::Exclusive
            };
            Group { members, kind }
        })
        .collect();
    let part = GroupPartition {
        groups,
        anti_ids: BTreeSet::new(),
    };
    debug_assert!(part.verify(data).is_ok());
    part
}

/// Completes every exclusive set into an exact group by appending an
/// anti-indicator (weight 1) and materializing its activations.
pub fn complete_groups(
    model: &MaxentModel,
    data: &Dataset,
    part: &GroupPartition,
) -> Result<(MaxentModel, Dataset, GroupPartition)> {
    if model.num_features() != data.num_features() {
        return Err(Error::invalid(format!(
            "model has {} features, dataset {}",
            model.num_features(),
            data.num_features()
        )));
    }
    part.verify(data)?;
    let owner = part.group_of(data.num_features())?;
    let mut weights = model.weights().to_vec();
    let mut groups = part.groups.clone();
    let mut anti_ids = part.anti_ids.clone();
    // anti id for each group that needs one
    let mut anti_for = vec![None; groups.len()];
    let mut missing = vec![false; groups.len()];
    for e in data.events() {
        for c in e.candidates() {
            missing.iter_mut().for_each(|m| *m = true);
            for &i in c.active() {
                missing[owner[i]] = false;
            }
            for (gi, &m) in missing.iter().enumerate() {
                if m && anti_for[gi].is_none() {
                    anti_for[gi] = Some(usize::MAX);
                }
            }
        }
    }
    for (gi, slot) in anti_for.iter_mut().enumerate() {
        if slot.is_some() {
            let id = weights.len();
            weights.push(1.0);
            groups[gi].members.push(id);
            anti_ids.insert(id);
            *slot = Some(id);
        }
        groups[gi].kind = GroupKind::Exact;
    }
    let mut out = data.clone();
    for e in out.events_mut() {
        for c in e.candidates_mut() {
            let mut present = vec![false; groups.len()];
            for &i in c.active() {
                present[owner[i]] = true;
            }
            let mut active = c.active().to_vec();
            for (gi, &p) in present.iter().enumerate() {
                if !p {
                    active.push(anti_for[gi].expect("anti-indicator allocated for incomplete set"));
                }
            }
            active.sort_unstable();
            *c = Candidate::from_sorted(c.label.clone(), active);
        }
    }
    out.set_num_features(weights.len());
    let mut new_model = MaxentModel::new(weights)?.with_names(model.names().clone());
    for &a in &anti_ids {
        if a >= model.num_features() {
            new_model.set_name(a, format!("~anti:{}", owner_of(&groups, a)));
        }
    }
    let new_part = GroupPartition { groups, anti_ids };
    Ok((new_model, out, new_part))
}

/// Re-applies a completed partition to the original data: each candidate on
/// which a group has no active member gets that group's anti-indicator.
pub fn materialize_groups(data: &Dataset, part: &GroupPartition) -> Result<Dataset> {
    let total = part.num_features();
    let owner = part.group_of(total)?;
    let anti_of: Vec<Option<FeatureId>> = part
        .groups
        .iter()
        .map(|g| g.members.iter().copied().find(|m| part.anti_ids.contains(m)))
        .collect();
    let mut out = data.clone().with_num_features(total)?;
    for e in out.events_mut() {
        for c in e.candidates_mut() {
            let mut present = vec![false; part.groups.len()];
            for &i in c.active() {
                if part.anti_ids.contains(&i) {
                    return Err(Error::invalid("data already contains anti-indicators"));
                }
                present[owner[i]] = true;
            }
            let mut active = c.active().to_vec();
            for (gi, &p) in present.iter().enumerate() {
                if !p {
                    active.push(
                        anti_of[gi]
                            .ok_or_else(|| Error::InvalidPartition(format!("group {gi} is not exact on the data")))?,
                    );
                }
            }
            active.sort_unstable();
            *c = Candidate::from_sorted(c.label.clone(), active);
        }
    }
    part.verify(&out)?;
    Ok(out)
}

fn owner_of(groups: &[Group], id: FeatureId) -> usize {
    groups
        .iter()
        .position(|g| g.members.contains(&id))
        .unwrap_or(usize::MAX)
}

/// Multiplies every member weight of `group` by `alpha`.
pub fn scale_group(model: &MaxentModel, group: &Group, alpha: ScaleFactor) -> Result<MaxentModel> {
    let mut weights = model.weights().to_vec();
    for &m in &group.members {
        let w = weights.get_mut(m).ok_or(Error::FeatureOutOfRange {
            feature: m,
            num_features: model.num_features(),
        })?;
        *w *= alpha.value();
    }
    Ok(MaxentModel::new(weights)?.with_names(model.names().clone()))
}

/// Scales each exact group by `1 / ((1 + SUBUNIT_MARGIN) · max)` so every
/// weight ends strictly below one.
pub fn to_subunit(model: &MaxentModel, part: &GroupPartition) -> Result<MaxentModel> {
    if !part.all_exact() {
        return Err(Error::InvalidPartition(
            "every group must be exact before scaling below one".into(),
        ));
    }
    part.group_of(model.num_features())?;
    let mut out = model.clone();
    for g in &part.groups {
        let max = g.members.iter().map(|&m| out.weight(m)).fold(0.0, f64::max);
        if g.members.is_empty() {
            continue;
        }
        if max <= 0.0 {
            return Err(Error::InvalidPartition("group with zero maximum weight".into()));
        }
        out = scale_group(&out, g, ScaleFactor::new(1.0 / ((1.0 + SUBUNIT_MARGIN) * max))?)?;
    }
    Ok(out)
}

/// Rescales each group so its anti-indicator has weight one, then deletes the
/// anti-indicators and renumbers the remaining features densely.
pub fn strip_anti_indicators(
    model: &MaxentModel,
    data: &Dataset,
    part: &GroupPartition,
) -> Result<(MaxentModel, Dataset)> {
    let mut scaled = model.clone();
    for g in &part.groups {
        let antis: Vec<_> = g.members.iter().filter(|m| part.anti_ids.contains(m)).collect();
        match antis.as_slice() {
            [] => {}
            [&a] => {
                let w = scaled.weight(a);
                if !(w > 0.0) {
                    return Err(Error::InvalidWeight { feature: a, value: w });
                }
                scaled = scale_group(&scaled, g, ScaleFactor::new(1.0 / w)?)?;
            }
            _ => {
                return Err(Error::InvalidPartition(
                    "group holds more than one anti-indicator".into(),
                ))
            }
        }
    }
    let n = model.num_features();
    let keep: Vec<bool> = (0..n).map(|i| !part.anti_ids.contains(&i)).collect();
    let remap = crate::maxent::remap_keeping(n, |i| keep[i]);
    let weights: Vec<f64> = (0..n).filter(|&i| keep[i]).map(|i| scaled.weight(i)).collect();
    let mut names = std::collections::BTreeMap::new();
    for (&id, name) in model.names() {
        if let Some(Some(new)) = remap.map.get(id) {
            names.insert(*new, name.clone());
        }
    }
    let events = data
        .events()
        .iter()
        .map(|e| {
            EventBlock::new(
                e.id.clone(),
                e.true_label(),
                e.candidates().iter().map(|c| remap.apply(c)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let stripped = MaxentModel::new(weights)?.with_names(names);
    Ok((stripped, Dataset::new(events, remap.num_kept)?))
}
