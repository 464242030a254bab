//! Single-channel image planes and their block tiling.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// H×W plane of reals, row-major. Pixel values are nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return dim_err(format!(
                "image {height}x{width} cannot hold {} pixels",
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `[1, H, W]` tensor view of the plane.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        match *t.shape() {
            [1, h, w] | [h, w] => Image::new(h, w, t.data().to_vec()),
            ref s => dim_err(format!("expected a single-channel plane, got {s:?}")),
        }
    }
}

/// Square B×B tile, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    side: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return dim_err(format!("block side {side} cannot hold {} values", data.len()));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Row-major flattening of a block into a length-B² vector.
pub fn vectorize_block(block: &Block) -> Vec<f64> {
    block.data.clone()
}

pub fn devectorize_block(v: &[f64], side: usize) -> Result<Block> {
    Block::new(side, v.to_vec())
}

/// Raster-ordered, non-overlapping B×B tiling of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
    pub blocks: Vec<Block>,
}

impl BlockGrid {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, i: usize, j: usize) -> &Block {
        &self.blocks[i * self.cols + j]
    }
}

pub fn partition_blocks(image: &Image, side: usize) -> Result<BlockGrid> {
    if side == 0 || !image.height.is_multiple_of(side) || !image.width.is_multiple_of(side) {
        return dim_err(format!(
            "{}x{} image is not divisible into {side}x{side} blocks",
            image.height, image.width
        ));
    }
    let (rows, cols) = (image.height / side, image.width / side);
    let mut blocks = Vec::with_capacity(rows * cols);
    for bi in 0..rows {
        for bj in 0..cols {
            let mut data = Vec::with_capacity(side * side);
            for y in 0..side {
                let start = (bi * side + y) * image.width + bj * side;
                data.extend_from_slice(&image.data[start..start + side]);
            }
            blocks.push(Block { side, data });
        }
    }
    Ok(BlockGrid { rows, cols, side, blocks })
}

pub fn assemble_blocks(grid: &BlockGrid) -> Result<Image> {
    if grid.blocks.len() != grid.rows * grid.cols || grid.blocks.iter().any(|b| b.side != grid.side) {
        return dim_err("block grid is inconsistent");
    }
    let s = grid.side;
    let (h, w) = (grid.rows * s, grid.cols * s);
    let mut data = vec![0.0; h * w];
    for bi in 0..grid.rows {
        for bj in 0..grid.cols {
            let b = &grid.blocks[bi * grid.cols + bj];
            for y in 0..s {
                let start = (bi * s + y) * w + bj * s;
                data[start..start + s].copy_from_slice(&b.data[y * s..(y + 1) * s]);
            }
        }
    }
    Image::new(h, w, data)
}

/// Assemble an image from per-block vectors given in raster order.
pub fn assemble_vectors(vectors: &[Vec<f64>], rows: usize, cols: usize, side: usize) -> Result<Image> {
    let blocks = vectors
        .iter()
        .map(|v| devectorize_block(v, side))
        .collect::<Result<Vec<_>>>()?;
    assemble_blocks(&BlockGrid { rows, cols, side, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_64_by_32() {
        let img = Image::from_fn(64, 64, |y, x| (y * 64 + x) as f64);
        let g = partition_blocks(&img, 32).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (2, 2, 4));
        assert_eq!(g.block(1, 0).data()[0], (32 * 64) as f64);
        assert_eq!(assemble_blocks(&g).unwrap(), img);
    }

    #[test]
    fn partition_rejects_misaligned() {
        let img = Image::zeros(96, 80);
        assert!(matches!(partition_blocks(&img, 32), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn vectorize_is_row_major() {
        let b = Block::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(vectorize_block(&b), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(devectorize_block(&vectorize_block(&b), 2).unwrap(), b);
        let c = Block::new(3, vec![0.25; 9]).unwrap();
        assert!(vectorize_block(&c).iter().all(|&v| v == 0.25));
    }

    proptest! {
        #[test]
        fn assemble_inverts_partition(rb in 1usize..4, cb in 1usize..4, side in 1usize..6, seed in any::<u64>()) {
            let mut rng = crate::rng::rng(seed);
            let (h, w) = (rb * side, cb * side);
            let img = Image::new(h, w, crate::rng::normal_vec(&mut rng, h * w, 1.0)).unwrap();
            let g = partition_blocks(&img, side).unwrap();
            prop_assert_eq!(assemble_blocks(&g).unwrap(), img);
        }
    }
}
