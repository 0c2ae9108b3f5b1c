use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassLabel, DatasetError, Split, TileRecord};

/// Requested number of records per class in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 216 / 24 / 60 per class.
    pub const PUBLISHED: SplitCounts = SplitCounts {
        train: 216,
        validation: 24,
        test: 60,
    };

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    fn in_order(&self) -> [(Split, usize); 3] {
        [
            (Split::Train, self.train),
            (Split::Validation, self.validation),
            (Split::Test, self.test),
        ]
    }
}

/// Assigns exact per-class counts to train, validation and test, in that order,
/// after a seeded shuffle within each class. Rejected records and any leftovers
/// end up unassigned. Records come back in input order.
///
/// With `by_slide`, whole slides are dealt to splits instead of single tiles, so
/// no slide contributes to two splits; tiles left over on a partially used slide
/// stay unassigned.
pub fn stratified_split(
    mut records: Vec<TileRecord>,
    counts: SplitCounts,
    seed: u64,
    by_slide: bool,
) -> Result<Vec<TileRecord>, DatasetError> {
    for r in &mut records {
        r.split = Split::Unassigned;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in ClassLabel::ALL {
        let eligible: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].class_label == class && !records[i].is_rejected())
            .collect();
        if eligible.len() < counts.total() {
            return Err(DatasetError::InsufficientRecords {
                class,
                needed: counts.total(),
                available: eligible.len(),
            });
        }
        if by_slide {
            assign_by_slide(&mut records, eligible, class, counts, &mut rng)?;
        } else {
            let mut order = eligible;
            order.shuffle(&mut rng);
            let mut cursor = order.into_iter();
            for (split, n) in counts.in_order() {
                for i in cursor.by_ref().take(n) {
                    records[i].split = split;
                }
            }
        }
    }
    Ok(records)
}

fn assign_by_slide(
    records: &mut [TileRecord],
    eligible: Vec<usize>,
    class: ClassLabel,
    counts: SplitCounts,
    rng: &mut ChaCha8Rng,
) -> Result<(), DatasetError> {
    let mut slide_order: Vec<&str> = Vec::new();
    let mut by_slide: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &eligible {
        let id = records[i].slide_id.as_str();
        by_slide
            .entry(id)
            .or_insert_with(|| {
                slide_order.push(id);
                Vec::new()
            })
            .push(i);
    }
    slide_order.shuffle(rng);
    let mut groups: Vec<Vec<usize>> = slide_order
        .into_iter()
        .map(|id| {
            let mut tiles = by_slide.remove(id).unwrap_or_default();
            tiles.shuffle(rng);
            tiles
        })
        .collect::<Vec<_>>();
    groups.reverse();

    let mut assignments = Vec::new();
    for (split, n) in counts.in_order() {
        let mut remaining = n;
        while remaining > 0 {
            let Some(tiles) = groups.pop() else {
                return Err(DatasetError::InsufficientRecords {
                    class,
                    needed: counts.total(),
                    available: eligible.len(),
                });
            };
            for &i in tiles.iter().take(remaining) {
                assignments.push((i, split));
            }
            remaining -= remaining.min(tiles.len());
        }
    }
    for (i, split) in assignments {
        records[i].split = split;
    }
    Ok(())
}
