//! Sharing-aware parameter accounting.

use std::fmt;

use crate::layout::Layout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub input: usize,
    pub output: usize,
    pub decoder: usize,
    /// Elements used by both the input and output layer, counted once in
    /// `input` and the total.
    pub shared: usize,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn from_layout(layout: &Layout) -> Self {
        Self {
            input: layout.total_with_prefix("input."),
            output: layout.total_with_prefix("output."),
            decoder: layout.total_with_prefix("decoder."),
            shared: layout.shared(),
            total: layout.total(),
        }
    }

    /// Input plus output layer parameters, shared ones once.
    pub fn embedding_layers(&self) -> usize {
        self.input + self.output
    }

    /// `1 - candidate / baseline` over the input and output layers.
    pub fn reduction_vs(&self, baseline: &ParamBreakdown) -> f64 {
        1.0 - self.embedding_layers() as f64 / baseline.embedding_layers() as f64
    }
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input\t{}\t{}", self.input, millions(self.input))?;
        writeln!(f, "output\t{}\t{}", self.output, millions(self.output))?;
        writeln!(f, "decoder\t{}\t{}", self.decoder, millions(self.decoder))?;
        writeln!(f, "shared\t{}\t{}", self.shared, millions(self.shared))?;
        write!(f, "total\t{}\t{}", self.total, millions(self.total))
    }
}
