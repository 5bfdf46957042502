use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Dense volume of class ids in `0..NUM_CLASSES`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Data(format!("label extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Data(format!(
                "label volume {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!(
                "label {} at voxel {:?} outside 0..{NUM_CLASSES}",
                data[i],
                unravel(shape, i)
            )));
        }
        Ok(LabelVolume {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        LabelVolume {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> u8 {
        self.data[ravel(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], class: u8) {
        let i = ravel(&self.shape, index);
        self.data[i] = class;
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }
}

pub(crate) fn ravel(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len());
    index.iter().zip(shape).fold(0, |acc, (&i, &e)| {
        assert!(i < e, "index {index:?} out of bounds for {shape:?}");
        acc * e + i
    })
}

pub(crate) fn unravel(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}
