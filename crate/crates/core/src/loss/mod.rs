//! Training objectives and the task-type dispatch between them.

mod align;
mod contrastive;
pub mod ctc;
pub mod ctc_oracle;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Real;

pub use align::{mse_align, MseAlign};
pub use contrastive::{cls_contrastive, cosent, info_nce, info_nce_scores, GradedPair};
pub use ctc::{ctc_forward, ctc_greedy_decode, ctc_loss, CtcLoss, CtcTable};

/// Downstream task family of a training example or evaluation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Retrieval,
    Reranking,
    Sts,
    PairClassification,
    Classification,
    Clustering,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::Retrieval,
        TaskType::Reranking,
        TaskType::Sts,
        TaskType::PairClassification,
        TaskType::Classification,
        TaskType::Clustering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Retrieval => "retrieval",
            TaskType::Reranking => "reranking",
            TaskType::Sts => "sts",
            TaskType::PairClassification => "pair_classification",
            TaskType::Classification => "classification",
            TaskType::Clustering => "clustering",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    InfoNce,
    Cosent,
    ClsContrastive,
}

/// The task-to-objective table. Exhaustive over [`TaskType`].
pub fn select_loss(task: TaskType) -> LossKind {
    match task {
        TaskType::Retrieval | TaskType::Reranking => LossKind::InfoNce,
        TaskType::Sts | TaskType::PairClassification => LossKind::Cosent,
        TaskType::Classification | TaskType::Clustering => LossKind::ClsContrastive,
    }
}

/// A scalar loss with its gradient for each input vector, in input order.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub loss: T,
    pub grads: Vec<Vec<T>>,
}

/// Evaluates the objective `kind` over `embeddings`.
///
/// For the softmax objectives the layout is `[query, positive, negatives..]`.
/// Cosent uses `pairs` to index into `embeddings`.
pub fn task_loss<T: Real>(
    kind: LossKind,
    embeddings: &[&[T]],
    pairs: &[GradedPair],
    tau: T,
) -> Result<LossGrads<T>> {
    match kind {
        LossKind::InfoNce | LossKind::ClsContrastive => {
            let (q, rest) = embeddings
                .split_first()
                .ok_or(crate::Error::EmptyInput("task_loss"))?;
            let (pos, negs) = rest
                .split_first()
                .ok_or(crate::Error::EmptyInput("task_loss"))?;
            if kind == LossKind::InfoNce {
                info_nce(q, pos, negs, tau)
            } else {
                cls_contrastive(q, pos, negs, tau)
            }
        }
        LossKind::Cosent => cosent(embeddings, pairs, tau),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_table() {
        assert_eq!(select_loss(TaskType::Retrieval), LossKind::InfoNce);
        assert_eq!(select_loss(TaskType::Reranking), LossKind::InfoNce);
        assert_eq!(select_loss(TaskType::Sts), LossKind::Cosent);
        assert_eq!(select_loss(TaskType::PairClassification), LossKind::Cosent);
        assert_eq!(select_loss(TaskType::Classification), LossKind::ClsContrastive);
        assert_eq!(select_loss(TaskType::Clustering), LossKind::ClsContrastive);
    }

    #[test]
    fn task_names_round_trip_through_serde() {
        for task in TaskType::ALL {
            let json = serde_json::to_string(&task).unwrap();
            assert_eq!(json, format!("\"{}\"", task.as_str()));
            assert_eq!(serde_json::from_str::<TaskType>(&json).unwrap(), task);
        }
    }
}
