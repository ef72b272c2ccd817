use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// One backbone block. Every block is followed by the backbone activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Fully connected layer; inputs of higher rank are flattened first.
    Dense { input: usize, output: usize },
    /// Square-kernel convolution with `kernel / 2` zero padding.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layer stack shared by every exit of a multi-exit network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub blocks: Vec<BlockSpec>,
    pub activation: Activation,
}

impl BackboneSpec {
    /// A stack of dense blocks `input -> widths[0] -> widths[1] -> ...`.
    pub fn dense(input: usize, widths: &[usize], activation: Activation) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            blocks.push(BlockSpec::Dense {
                input: prev,
                output: w,
            });
            prev = w;
        }
        Self {
            input_shape: vec![input],
            blocks,
            activation,
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Per-sample output shape of every block, checking that adjacent blocks compose.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(contract(format!(
                "invalid backbone input shape {:?}",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            shape = match *block {
                BlockSpec::Dense { input, output } => {
                    let flat: usize = shape.iter().product();
                    if flat != input || output == 0 {
                        return Err(contract(format!(
                            "block {}: dense {input}->{output} cannot follow shape {shape:?}",
                            i + 1
                        )));
                    }
                    vec![output]
                }
                BlockSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(contract(format!(
                            "block {}: conv with {in_channels} input channels cannot follow shape {shape:?}",
                            i + 1
                        )));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(contract(format!("block {}: degenerate conv", i + 1)));
                    }
                    let pad = kernel / 2;
                    if shape[1] + 2 * pad < kernel || shape[2] + 2 * pad < kernel {
                        return Err(contract(format!(
                            "block {}: kernel {kernel} larger than input {shape:?}",
                            i + 1
                        )));
                    }
                    let ho = (shape[1] + 2 * pad - kernel) / stride + 1;
                    let wo = (shape[2] + 2 * pad - kernel) / stride + 1;
                    vec![out_channels, ho, wo]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }
}

/// Multiply-add counts as 2 FLOPs and each bias add as 1; activations are free.
pub(crate) fn block_flops(block: &BlockSpec, output_shape: &[usize]) -> u64 {
    match *block {
        BlockSpec::Dense { input, output } => (2 * input * output + output) as u64,
        BlockSpec::Conv {
            in_channels,
            kernel,
            ..
        } => {
            let positions: usize = output_shape.iter().product();
            (positions * (2 * in_channels * kernel * kernel + 1)) as u64
        }
    }
}

/// Exit head cost: optional global average pooling, then a dense layer to `classes` logits.
pub(crate) fn head_flops(block_output: &[usize], classes: usize) -> u64 {
    let pool = if block_output.len() == 3 {
        block_output.iter().product::<usize>()
    } else {
        0
    };
    let features = block_output[0];
    (pool + 2 * features * classes + classes) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_stack_composes() {
        let spec = BackboneSpec::dense(16, &[32, 32, 8], Activation::Relu);
        assert_eq!(spec.output_shapes().unwrap(), vec![vec![32], vec![32], vec![8]]);
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let mut spec = BackboneSpec::dense(16, &[32, 32], Activation::Relu);
        spec.blocks[1] = BlockSpec::Dense {
            input: 31,
            output: 8,
        };
        assert!(spec.output_shapes().is_err());
    }

    #[test]
    fn conv_then_dense_flattens() {
        let spec = BackboneSpec {
            input_shape: vec![3, 8, 8],
            blocks: vec![
                BlockSpec::Conv {
                    in_channels: 3,
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
                BlockSpec::Dense {
                    input: 64,
                    output: 10,
                },
            ],
            activation: Activation::Relu,
        };
        assert_eq!(spec.output_shapes().unwrap(), vec![vec![4, 4, 4], vec![10]]);
    }

    #[test]
    fn dense_block_flop_convention() {
        let block = BlockSpec::Dense {
            input: 64,
            output: 10,
        };
        assert_eq!(block_flops(&block, &[10]), 1290);
    }
}
