use rand::Rng;

use crate::error::{Error, Result};

/// Reference to a training example within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub index: usize,
    /// Extra copy added by oversampling.
    pub duplicate: bool,
}

/// Keeps every example once and oversamples the minority class with
/// replacement until both classes have the same count.
pub fn rebalance<R: Rng>(labels: &[usize], rng: &mut R) -> Result<Vec<PlanEntry>> {
    let by_class: [Vec<usize>; 2] = [0, 1].map(|c| {
        labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    });
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("rebalance", format!("label {bad} is not 0 or 1")));
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::invalid("rebalance", "both classes must be present"));
    }
    let mut out: Vec<PlanEntry> = (0..labels.len())
        .map(|index| PlanEntry {
            index,
            duplicate: false,
        })
        .collect();
    let (minority, majority) = if by_class[0].len() < by_class[1].len() {
        (&by_class[0], &by_class[1])
    } else {
        (&by_class[1], &by_class[0])
    };
    for _ in 0..majority.len() - minority.len() {
        out.push(PlanEntry {
            index: minority[rng.gen_range(0..minority.len())],
            duplicate: true,
        });
    }
    Ok(out)
}
