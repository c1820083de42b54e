use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, contiguous range inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat store of learnable weights, partitioned into named segments.
///
/// Segments are laid out back to back in declaration order, so they are
/// disjoint and cover the whole vector by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Builds a zero-filled vector from `(name, length)` pairs.
    pub fn zeros(layout: &[(&str, usize)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, len) in layout {
            if segments.iter().any(|s: &Segment| s.name == *name) {
                return Err(Error::Config(format!("duplicate segment name `{name}`")));
            }
            segments.push(Segment {
                name: (*name).to_string(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Ok(Self {
            values: vec![0.0; offset],
            segments,
        })
    }

    /// Reassembles a vector from raw parts, validating the segment invariants.
    pub fn from_parts(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for (k, seg) in segments.iter().enumerate() {
            if seg.offset != cursor {
                return Err(Error::Config(format!(
                    "segment `{}` starts at {} but previous segments end at {cursor}",
                    seg.name, seg.offset
                )));
            }
            if segments[..k].iter().any(|s| s.name == seg.name) {
                return Err(Error::Config(format!("duplicate segment name `{}`", seg.name)));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(Error::Config(format!(
                "segments cover {cursor} values but vector holds {}",
                values.len()
            )));
        }
        check_finite(&values, "ParamVector::from_parts")?;
        Ok(Self { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no segment named `{name}`")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let range = self.segment(name)?.range();
        Ok(&self.values[range])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.segment(name)?.range();
        Ok(&mut self.values[range])
    }

    /// Overwrites all values. Rejects wrong lengths and non-finite entries.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Config(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        check_finite(values, "ParamVector::set_values")?;
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Applies `f` to the raw values, then re-checks finiteness.
    pub fn update<F: FnOnce(&mut [f64])>(&mut self, f: F) -> Result<()> {
        let backup = self.values.clone();
        f(&mut self.values);
        if let Err(e) = check_finite(&self.values, "ParamVector::update") {
            self.values = backup;
            return Err(e);
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }
}

pub(crate) fn check_finite(values: &[f64], location: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(k) => Err(Error::numeric(
            location,
            format!("entry {k} is {}", values[k]),
        )),
    }
}
