use super::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer label map, row-major, labels in `{0,1,2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::invalid(
                "LabelMap",
                format!("{width}x{height} map cannot hold {} labels", labels.len()),
            ));
        }
        let map = Self { width, height, labels };
        map.validate()?;
        Ok(map)
    }

    /// Rejects the first out-of-range label with its position.
    pub fn validate(&self) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            Some(i) => Err(Error::Label {
                label: self.labels[i],
                row: i / self.width,
                col: i % self.width,
            }),
            None => Ok(()),
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// One-hot `[3,H,W]` encoding of a label map.
pub fn encode_mask(mask: &LabelMap) -> Result<Tensor> {
    mask.validate()?;
    let hw = mask.width * mask.height;
    let mut data = vec![0.0; NUM_CLASSES * hw];
    for (i, &l) in mask.labels.iter().enumerate() {
        data[l as usize * hw + i] = 1.0;
    }
    Tensor::new(&[NUM_CLASSES, mask.height, mask.width], data)
}

/// Channel argmax of a `[C,H,W]` or `[1,C,H,W]` tensor; ties go to the lowest class.
pub fn decode_mask(t: &Tensor) -> Result<LabelMap> {
    let view = match t.shape() {
        [c, h, w] => t.clone().reshape(&[1, *c, *h, *w])?,
        [1, _, _, _] => t.clone(),
        other => return Err(Error::shape("decode_mask", format!("expected [C,H,W] or [1,C,H,W], got {other:?}"))),
    };
    let (_, _, h, w) = view.dims4("decode_mask")?;
    let labels = crate::losses::argmax_labels(&view)?;
    LabelMap::new(w, h, labels)
}
