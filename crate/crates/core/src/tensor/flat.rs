use crate::error::{DogeError, Result};

/// Anything that owns a named block of parameters and (maybe) its gradient.
pub trait GradientSource {
    fn name(&self) -> &str;
    fn numel(&self) -> usize;
    fn grad(&self) -> Option<&[f64]>;
}

/// Parameter gradients concatenated in declaration order.
///
/// Every group keeps an entry in `offsets`/`lengths`; groups excluded by a
/// mask have length zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient {
    values: Vec<f64>,
    offsets: Vec<usize>,
    lengths: Vec<usize>,
    group_sizes: Vec<usize>,
}

impl FlatGradient {
    /// Builds a flat vector from per-group slices. `mask` lists the group ids
    /// to keep; `None` keeps all of them.
    pub fn from_groups<S: AsRef<[f64]>>(groups: &[S], mask: Option<&[usize]>) -> Result<Self> {
        let keep = selection(groups.len(), mask)?;
        let mut values = Vec::new();
        let mut offsets = Vec::with_capacity(groups.len());
        let mut lengths = Vec::with_capacity(groups.len());
        let mut group_sizes = Vec::with_capacity(groups.len());
        for (g, kept) in groups.iter().zip(&keep) {
            let g = g.as_ref();
            offsets.push(values.len());
            group_sizes.push(g.len());
            if *kept {
                values.extend_from_slice(g);
                lengths.push(g.len());
            } else {
                lengths.push(0);
            }
        }
        Ok(FlatGradient {
            values,
            offsets,
            lengths,
            group_sizes,
        })
    }

    /// All-zero gradient with the same layout.
    pub fn zeros_like(&self) -> Self {
        FlatGradient {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn group_count(&self) -> usize {
        self.offsets.len()
    }

    /// Parameter count if every group were included.
    pub fn full_len(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn is_included(&self, group: usize) -> bool {
        self.lengths[group] > 0 || self.group_sizes[group] == 0
    }

    /// Values of one group; empty when the group is masked out.
    pub fn segment(&self, group: usize) -> &[f64] {
        &self.values[self.offsets[group]..self.offsets[group] + self.lengths[group]]
    }

    /// Copy keeping only `mask`'s groups. Masking a masked vector can only
    /// drop more groups.
    pub fn restrict(&self, mask: &[usize]) -> Result<Self> {
        let keep = selection(self.group_count(), Some(mask))?;
        let segments: Vec<&[f64]> = (0..self.group_count())
            .map(|g| {
                if keep[g] {
                    self.segment(g)
                } else {
                    &[][..]
                }
            })
            .collect();
        let mut out = FlatGradient::from_groups(&segments, None)?;
        for (g, kept) in keep.iter().enumerate() {
            if !kept {
                out.lengths[g] = 0;
            }
        }
        out.group_sizes = self.group_sizes.clone();
        Ok(out)
    }

    fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.lengths != other.lengths || self.group_sizes != other.group_sizes {
            return Err(DogeError::contract(format!(
                "{op}: flat gradients have different layouts ({} vs {} values)",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Inner product, summed in index order.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_layout(other, "dot")?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// Expands to per-group vectors of full size, zero-filling masked groups.
    pub fn to_groups(&self) -> Vec<Vec<f64>> {
        (0..self.group_count())
            .map(|g| {
                if self.lengths[g] == self.group_sizes[g] {
                    self.segment(g).to_vec()
                } else {
                    vec![0.0; self.group_sizes[g]]
                }
            })
            .collect()
    }
}

fn selection(groups: usize, mask: Option<&[usize]>) -> Result<Vec<bool>> {
    let Some(mask) = mask else {
        return Ok(vec![true; groups]);
    };
    let mut keep = vec![false; groups];
    for &g in mask {
        if g >= groups {
            return Err(DogeError::contract(format!(
                "mask references group {g}, only {groups} groups exist"
            )));
        }
        keep[g] = true;
    }
    Ok(keep)
}

/// Concatenates the gradient slots of `params` in order. Every parameter kept
/// by the mask must already hold a gradient.
pub fn flatten_gradients<P: GradientSource>(params: &[P], mask: Option<&[usize]>) -> Result<FlatGradient> {
    let keep = selection(params.len(), mask)?;
    let mut groups: Vec<&[f64]> = Vec::with_capacity(params.len());
    let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    for ((p, kept), z) in params.iter().zip(&keep).zip(&zeros) {
        match (p.grad(), kept) {
            (Some(g), true) => groups.push(g),
            (None, true) => {
                return Err(DogeError::contract(format!(
                    "parameter '{}' has no gradient; run backward first",
                    p.name()
                )))
            }
            (_, false) => groups.push(z),
        }
    }
    FlatGradient::from_groups(&groups, mask)
}
