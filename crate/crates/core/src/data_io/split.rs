use std::ops::Range;

use crate::data_io::grid::GridField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frame ranges of an 8:1:1 chronological split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    /// Boundaries at `floor(0.8·T)` and `floor(0.9·T)`.
    pub fn for_frames(nt: usize) -> Result<Self> {
        if nt < 10 {
            return Err(Error::config(format!(
                "chronological split needs at least 10 frames, found {nt}"
            )));
        }
        let a = nt * 8 / 10;
        let b = nt * 9 / 10;
        Ok(SplitRanges {
            train: 0..a,
            val: a..b,
            test: b..nt,
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Debug, Clone)]
pub struct ChronoSplit<T> {
    pub ranges: SplitRanges,
    pub train: GridField<T>,
    pub val: GridField<T>,
    pub test: GridField<T>,
}

pub fn chronological_split<T: Scalar>(field: &GridField<T>) -> Result<ChronoSplit<T>> {
    let ranges = SplitRanges::for_frames(field.nt())?;
    Ok(ChronoSplit {
        train: field.frames(ranges.train.clone())?,
        val: field.frames(ranges.val.clone())?,
        test: field.frames(ranges.test.clone())?,
        ranges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::grid::{Axis, GridMeta};

    #[test]
    fn split_sizes() {
        assert_eq!(SplitRanges::for_frames(10).unwrap().sizes(), (8, 1, 1));
        assert_eq!(SplitRanges::for_frames(100).unwrap().sizes(), (80, 10, 10));
        assert_eq!(SplitRanges::for_frames(19).unwrap().sizes(), (15, 2, 2));
        assert!(SplitRanges::for_frames(9).is_err());
    }

    #[test]
    fn splits_concatenate_back_to_the_original() {
        let meta = GridMeta::new(Axis::new(0.0, 1.0, 2), Axis::new(0.0, 1.0, 1), Axis::new(0.0, 0.5, 12));
        let f = GridField::<f64>::from_fn(meta, vec!["u".into()], |x, _, t| vec![t * 10.0 + x]).unwrap();
        let s = chronological_split(&f).unwrap();
        assert_eq!(s.val.meta().t.origin, f.meta().t.coord(9));
        let joined = GridField::concat_frames(&[s.train, s.val, s.test]).unwrap();
        assert_eq!(joined, f);
    }
}
