use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::dim_err;
use crate::{Result, Tensor};

/// A stream of `(input, target)` activation batches. For plain
/// autoencoders the target is the input.
pub trait BatchSource {
    /// Rows per epoch.
    fn rows(&self) -> usize;
    fn input_width(&self) -> usize;
    fn target_width(&self) -> usize;
    /// The next `size` rows; wraps into a new epoch when exhausted.
    fn next_batch(&mut self, size: usize) -> Result<(Tensor, Tensor)>;
    /// The first `size` rows in storage order, without consuming anything.
    fn head(&self, size: usize) -> Result<(Tensor, Tensor)>;
}

/// Activations held in memory, visited in a seeded shuffled order that is
/// redrawn every epoch.
#[derive(Clone, Debug)]
pub struct InMemorySource {
    inputs: Tensor,
    targets: Option<Tensor>,
    order: Vec<usize>,
    cursor: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

impl InMemorySource {
    pub fn new(inputs: Tensor, seed: u64) -> Result<Self> {
        Self::build(inputs, None, seed)
    }

    /// Paired rows, e.g. MLP input and output for a transcoder.
    pub fn paired(inputs: Tensor, targets: Tensor, seed: u64) -> Result<Self> {
        let (r, _) = targets.dims2()?;
        if r != inputs.dims2()?.0 {
            return Err(dim_err!("{} input rows but {} target rows", inputs.shape()[0], r));
        }
        Self::build(inputs, Some(targets), seed)
    }

    fn build(inputs: Tensor, targets: Option<Tensor>, seed: u64) -> Result<Self> {
        let (rows, _) = inputs.dims2()?;
        if rows == 0 {
            return Err(dim_err!("activation source has no rows"));
        }
        let mut s = Self {
            inputs,
            targets,
            order: (0..rows).collect(),
            cursor: 0,
            shuffle: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Visits rows in storage order instead.
    pub fn sequential(mut self) -> Self {
        self.shuffle = false;
        self.order = (0..self.order.len()).collect();
        self.cursor = 0;
        self
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        self.targets.as_ref().unwrap_or(&self.inputs)
    }
}

impl BatchSource for InMemorySource {
    fn rows(&self) -> usize {
        self.order.len()
    }

    fn input_width(&self) -> usize {
        self.inputs.shape()[1]
    }

    fn target_width(&self) -> usize {
        self.targets().shape()[1]
    }

    fn next_batch(&mut self, size: usize) -> Result<(Tensor, Tensor)> {
        if size == 0 {
            return Err(dim_err!("batch size must be positive"));
        }
        let mut idx = Vec::with_capacity(size);
        while idx.len() < size {
            if self.cursor == self.order.len() {
                if self.shuffle {
                    self.order.shuffle(&mut self.rng);
                }
                self.cursor = 0;
            }
            let take = (size - idx.len()).min(self.order.len() - self.cursor);
            idx.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        let x = self.inputs.select_rows(&idx)?;
        let y = match &self.targets {
            Some(t) => t.select_rows(&idx)?,
            None => x.clone(),
        };
        Ok((x, y))
    }

    fn head(&self, size: usize) -> Result<(Tensor, Tensor)> {
        let idx: Vec<usize> = (0..size.min(self.order.len())).collect();
        Ok((self.inputs.select_rows(&idx)?, self.targets().select_rows(&idx)?))
    }
}
