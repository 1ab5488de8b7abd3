use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `m` equally long token sequences, one per quantizer order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub orders: Vec<Vec<usize>>,
    pub frame_hop: usize,
    pub sample_rate: u32,
}

impl TokenGrid {
    pub fn new(orders: Vec<Vec<usize>>, frame_hop: usize, sample_rate: u32) -> Result<Self> {
        let g = Self {
            orders,
            frame_hop,
            sample_rate,
        };
        g.check_shape()?;
        Ok(g)
    }

    pub fn num_orders(&self) -> usize {
        self.orders.len()
    }

    /// Frames per order; zero for an empty grid.
    pub fn len(&self) -> usize {
        self.orders.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_shape(&self) -> Result<()> {
        if self.orders.is_empty() {
            return Err(Error::input("token grid has no orders"));
        }
        let t = self.orders[0].len();
        if let Some((i, o)) = self.orders.iter().enumerate().find(|(_, o)| o.len() != t) {
            return Err(Error::input(format!(
                "order {i} has length {} but order 0 has length {t}",
                o.len()
            )));
        }
        Ok(())
    }

    /// Equal lengths and every token below `codebook_size`.
    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        self.check_shape()?;
        for o in &self.orders {
            if let Some(&bad) = o.iter().find(|&&t| t >= codebook_size) {
                return Err(Error::Index {
                    what: "token",
                    index: bad,
                    limit: codebook_size,
                });
            }
        }
        Ok(())
    }
}

/// One line of a token-grid JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRecord {
    pub id: String,
    pub sample_count: usize,
    pub frame_hop: usize,
    pub orders: Vec<Vec<usize>>,
}

impl GridRecord {
    pub fn from_grid(id: impl Into<String>, sample_count: usize, grid: &TokenGrid) -> Self {
        Self {
            id: id.into(),
            sample_count,
            frame_hop: grid.frame_hop,
            orders: grid.orders.clone(),
        }
    }

    pub fn into_grid(self, sample_rate: u32) -> Result<TokenGrid> {
        TokenGrid::new(self.orders, self.frame_hop, sample_rate)
    }
}
