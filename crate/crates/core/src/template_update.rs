//! Unsupervised self-update with an infinite window, the append-only update
//! log and template rollback.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::matchers::{self, MatcherKind, Origin, Template, TrainedMatcher, WeightScheme};
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UpdatePolicy {
    /// Block template updates after this many consecutive rejections.
    /// `None` (the default) never blocks.
    pub max_consecutive_rejects: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Accepted,
    Rejected,
    /// Authenticated, but updating is blocked after repeated rejections.
    AuthenticatedUpdateBlocked,
    /// The sample passed but retraining failed; the template was reverted.
    RetrainFailed(Error),
}

impl UpdateOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, UpdateOutcome::Accepted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Attempt,
    Rollback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub order: u64,
    pub kind: EventKind,
    pub accepted: bool,
    /// Matcher score of the submitted sample (`None` for rollback markers).
    pub score: Option<f64>,
    pub origin: Origin,
    /// Template size after the event.
    pub template_size: usize,
    /// Submitted embedding (`None` for rollback markers).
    pub embedding: Option<Embedding>,
    /// Entries removed by a rollback marker.
    pub removed: usize,
}

/// Append-only history of update attempts and rollbacks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    events: Vec<UpdateEvent>,
}

impl UpdateLog {
    pub fn events(&self) -> &[UpdateEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn append(&mut self, event: UpdateEvent) {
        debug_assert!(self.events.last().is_none_or(|e| e.order < event.order));
        self.events.push(event);
    }

    /// Embeddings of accepted update attempts, oldest first.
    pub fn accepted_embeddings(&self) -> Vec<&[f64]> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Attempt && e.accepted)
            .filter_map(|e| e.embedding.as_deref())
            .collect()
    }

    pub fn rejected_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Attempt && !e.accepted)
            .count()
    }
}

/// A user's template, its matcher and the self-update state.
///
/// The matcher is retrained after every accepted sample; the threshold fixed
/// at enrolment never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct AuthSystem {
    kind: MatcherKind,
    scheme: WeightScheme,
    policy: UpdatePolicy,
    template: Template,
    matcher: TrainedMatcher,
    log: UpdateLog,
    next_order: u64,
    consecutive_rejects: usize,
    locked: bool,
}

impl AuthSystem {
    pub fn enrol(
        kind: MatcherKind,
        scheme: WeightScheme,
        enrolment: Vec<Embedding>,
        threshold: f64,
        policy: UpdatePolicy,
    ) -> Result<Self> {
        let n = enrolment.len() as u64;
        let template = Template::enrolled(enrolment)?;
        let matcher = matchers::train(kind, &template, scheme, threshold)?;
        Ok(Self {
            kind,
            scheme,
            policy,
            template,
            matcher,
            log: UpdateLog::default(),
            next_order: n,
            consecutive_rejects: 0,
            locked: false,
        })
    }

    pub fn kind(&self) -> MatcherKind {
        self.kind
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn threshold(&self) -> f64 {
        self.matcher.threshold
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn matcher(&self) -> &TrainedMatcher {
        &self.matcher
    }

    pub fn log(&self) -> &UpdateLog {
        &self.log
    }

    pub fn score(&self, e: &[f64]) -> Result<f64> {
        self.matcher.score(e)
    }

    pub fn decide(&self, e: &[f64]) -> Result<bool> {
        self.matcher.decide(e)
    }

    /// Whether updates are blocked; once blocked they stay blocked.
    pub fn updates_blocked(&self) -> bool {
        self.locked
    }

    fn take_order(&mut self) -> u64 {
        let o = self.next_order;
        self.next_order += 1;
        o
    }

    /// Authenticates `e`; on acceptance appends it to the template and
    /// retrains the matcher.
    pub fn attempt_auth_and_update(&mut self, e: &[f64]) -> Result<UpdateOutcome> {
        let score = self.matcher.score(e)?;
        let order = self.take_order();
        let passed = score >= self.matcher.threshold;
        let outcome = if !passed {
            UpdateOutcome::Rejected
        } else if self.updates_blocked() {
            UpdateOutcome::AuthenticatedUpdateBlocked
        } else {
            let mut candidate = self.template.clone();
            candidate.push(e.to_vec(), order, Origin::SelfUpdate)?;
            match matchers::train(self.kind, &candidate, self.scheme, self.matcher.threshold) {
                Ok(m) => {
                    self.template = candidate;
                    self.matcher = m;
                    UpdateOutcome::Accepted
                }
                Err(err) => UpdateOutcome::RetrainFailed(err),
            }
        };
        if passed {
            self.consecutive_rejects = 0;
        } else {
            self.consecutive_rejects += 1;
            if self
                .policy
                .max_consecutive_rejects
                .is_some_and(|m| self.consecutive_rejects >= m)
            {
                self.locked = true;
            }
        }
        self.log.append(UpdateEvent {
            order,
            kind: EventKind::Attempt,
            accepted: outcome.is_accepted(),
            score: Some(score),
            origin: Origin::SelfUpdate,
            template_size: self.template.len(),
            embedding: Some(e.to_vec()),
            removed: 0,
        });
        Ok(outcome)
    }

    /// Removes the last `k` self-update entries, retrains, and logs a marker.
    pub fn rollback(&mut self, k: usize) -> Result<()> {
        let mut candidate = self.template.clone();
        candidate.remove_last_self_updates(k)?;
        let matcher = matchers::train(self.kind, &candidate, self.scheme, self.matcher.threshold)?;
        self.template = candidate;
        self.matcher = matcher;
        let order = self.take_order();
        self.log.append(UpdateEvent {
            order,
            kind: EventKind::Rollback,
            accepted: false,
            score: None,
            origin: Origin::SelfUpdate,
            template_size: self.template.len(),
            embedding: None,
            removed: k,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn system(kind: MatcherKind) -> AuthSystem {
        AuthSystem::enrol(
            kind,
            WeightScheme::Flat,
            vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
            -0.8,
            UpdatePolicy::default(),
        )
        .unwrap()
    }

    #[test]
    fn centroid_sample_is_accepted_and_grows_template() {
        let mut s = system(MatcherKind::Centroid);
        assert_eq!(
            s.attempt_auth_and_update(&[0.5, 0.5]).unwrap(),
            UpdateOutcome::Accepted
        );
        assert_eq!(s.template().len(), 5);
        let ev = &s.log().events()[0];
        assert!(ev.accepted);
        assert_eq!(ev.template_size, 5);
        assert_eq!(ev.order, 4);
    }

    #[test]
    fn duplicates_are_kept() {
        let mut s = system(MatcherKind::Centroid);
        s.attempt_auth_and_update(&[0.6, 0.5]).unwrap();
        s.attempt_auth_and_update(&[0.6, 0.5]).unwrap();
        assert_eq!(s.template().len(), 6);
    }

    #[test]
    fn rejected_sample_leaves_state_untouched() {
        let mut s = system(MatcherKind::Centroid);
        let before = s.matcher().clone();
        assert_eq!(
            s.attempt_auth_and_update(&[5.0, 5.0]).unwrap(),
            UpdateOutcome::Rejected
        );
        assert_eq!(s.matcher(), &before);
        assert_eq!(s.template().len(), 4);
        assert_eq!(s.log().len(), 1);
        assert!(s.attempt_auth_and_update(&[1.0]).is_err());
    }

    #[test]
    fn rollback_inverts_accept() {
        let mut s = system(MatcherKind::Maximum);
        let before = s.template().clone();
        let m_before = s.matcher().clone();
        s.attempt_auth_and_update(&[1.2, 1.2]).unwrap();
        s.rollback(1).unwrap();
        assert_eq!(s.template(), &before);
        assert_eq!(s.matcher(), &m_before);
        let last = s.log().events().last().unwrap();
        assert_eq!(last.kind, EventKind::Rollback);
        assert_eq!(last.removed, 1);
        assert!(matches!(s.rollback(1), Err(Error::RollbackExceeds { .. })));
    }

    #[test]
    fn rollback_zero_keeps_decisions() {
        let mut s = system(MatcherKind::Centroid);
        let m = s.matcher().clone();
        s.rollback(0).unwrap();
        assert_eq!(s.matcher(), &m);
    }

    #[test]
    fn lockout_blocks_updates_but_not_authentication() {
        let mut s = AuthSystem::enrol(
            MatcherKind::Centroid,
            WeightScheme::Flat,
            vec![vec![0.0], vec![1.0]],
            -1.0,
            UpdatePolicy {
                max_consecutive_rejects: Some(2),
            },
        )
        .unwrap();
        s.attempt_auth_and_update(&[9.0]).unwrap();
        s.attempt_auth_and_update(&[9.0]).unwrap();
        assert_eq!(
            s.attempt_auth_and_update(&[0.5]).unwrap(),
            UpdateOutcome::AuthenticatedUpdateBlocked
        );
        assert_eq!(s.template().len(), 2);
    }
}
