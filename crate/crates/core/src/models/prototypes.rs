use crate::error::{Error, Result};
use crate::ndcore::{l2_normalize_rows, l2_normalize_rows_backward, Matrix, Param, Rng};

/// One learnable projection-space anchor per seen class.
///
/// Rows are stored unnormalized; losses consume [`PrototypeBank::unit`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub protos: Param,
    class_ids: Vec<usize>,
}

impl PrototypeBank {
    /// Unit-normalized Gaussian rows, one per entry of `seen_classes`.
    pub fn init(seen_classes: &[usize], dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut class_ids = seen_classes.to_vec();
        class_ids.sort_unstable();
        class_ids.dedup();
        if class_ids.len() != seen_classes.len() || class_ids.is_empty() || dim == 0 {
            return Err(Error::Contract(
                "prototype bank needs distinct seen classes and a positive dimension".into(),
            ));
        }
        let raw = Matrix::from_fn(class_ids.len(), dim, |_, _| rng.normal());
        Ok(Self {
            protos: Param::new(l2_normalize_rows(&raw)?),
            class_ids,
        })
    }

    pub fn from_parts(protos: Param, class_ids: Vec<usize>) -> Result<Self> {
        if protos.value.rows() != class_ids.len() {
            return Err(Error::Contract(format!(
                "{} prototype rows for {} classes",
                protos.value.rows(),
                class_ids.len()
            )));
        }
        Ok(Self { protos, class_ids })
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.protos.value.cols()
    }

    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.class_ids.binary_search(&class).ok()
    }

    /// Maps class ids to prototype rows.
    pub fn rows_of(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.row_of(c)
                    .ok_or_else(|| Error::Contract(format!("label {c} has no prototype")))
            })
            .collect()
    }

    pub fn unit(&self) -> Result<Matrix> {
        l2_normalize_rows(&self.protos.value)
    }

    /// Accumulates a gradient taken with respect to [`PrototypeBank::unit`].
    pub fn accumulate_unit_grad(&mut self, grad_unit: &Matrix) -> Result<()> {
        let g = l2_normalize_rows_backward(&self.protos.value, grad_unit)?;
        self.protos.grad.add_assign(&g)
    }
}
