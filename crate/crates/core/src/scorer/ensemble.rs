//! Deep-ensemble combination: the arithmetic mean of member distributions.

use super::{Condition, OptionDistribution, ScoreRequest, Scorer, ScorerError};
use crate::corpus::McqItem;

pub struct Ensemble {
    id: String,
    members: Vec<Box<dyn Scorer>>,
}

impl Ensemble {
    pub fn new(members: Vec<Box<dyn Scorer>>) -> Result<Self, ScorerError> {
        if members.is_empty() {
            return Err(ScorerError::EmptyEnsemble);
        }
        let id = format!(
            "ensemble[{}]",
            members.iter().map(|m| m.id()).collect::<Vec<_>>().join(",")
        );
        Ok(Ensemble { id, members })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn members(&self) -> &[Box<dyn Scorer>] {
        &self.members
    }
}

impl Scorer for Ensemble {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_len(&self) -> usize {
        self.members
            .iter()
            .map(|m| m.max_len())
            .min()
            .unwrap_or(usize::MAX)
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.score_batch(requests))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((0..requests.len())
            .map(|r| {
                let dists: Vec<OptionDistribution> =
                    per_member.iter().map(|m| m[r].clone()).collect();
                OptionDistribution::mean(&dists)
            })
            .collect())
    }
}

/// Mean of the members' distributions for one item.
pub fn ensemble_score(
    members: &[&dyn Scorer],
    item: &McqItem,
    condition: &Condition,
) -> Result<OptionDistribution, ScorerError> {
    if members.is_empty() {
        return Err(ScorerError::EmptyEnsemble);
    }
    let max_len = members
        .iter()
        .map(|m| m.max_len())
        .min()
        .unwrap_or(usize::MAX);
    let req = ScoreRequest::new(item, condition, max_len)?;
    let dists = members
        .iter()
        .map(|m| {
            m.score_batch(std::slice::from_ref(&req))?
                .pop()
                .ok_or_else(|| ScorerError::Protocol {
                    ids: vec![item.id.clone()],
                    message: format!("member `{}` returned no distribution", m.id()),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OptionDistribution::mean(&dists))
}
