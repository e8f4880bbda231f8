//! Dense H×W class-id maps and their 8-bit binary PGM encoding.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved label value for void / mislabelled pixels.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("label map must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        assert!(height > 0 && width > 0, "label map must be non-empty");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Per-class pixel histogram of length `num_classes`, ignore pixels excluded.
    ///
    /// Fails if a pixel holds a value that is neither a class id nor [`IGNORE`].
    pub fn histogram(&self, num_classes: usize) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; num_classes];
        for &v in &self.data {
            if v == IGNORE {
                continue;
            }
            let slot = counts
                .get_mut(v as usize)
                .ok_or_else(|| Error::validation(format!("label value {v} outside {num_classes} classes")))?;
            *slot += 1;
        }
        Ok(counts)
    }

    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_pgm(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut tokens = Vec::with_capacity(4);
        // Header: magic, width, height, maxval separated by whitespace; '#' starts a comment.
        while tokens.len() < 4 {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::validation(format!("PGM header: {e}")))?;
            if n == 0 {
                return Err(Error::validation("PGM header truncated"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens.len() != 4 || tokens[0] != "P5" {
            return Err(Error::validation(format!("not an 8-bit binary PGM header: {tokens:?}")));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::validation(format!("PGM {what} is not an integer: {s}")))
        };
        let width = parse(&tokens[1], "width")?;
        let height = parse(&tokens[2], "height")?;
        let maxval = parse(&tokens[3], "maxval")?;
        if maxval > 255 || maxval == 0 {
            return Err(Error::validation(format!("PGM maxval {maxval} is not 8-bit")));
        }
        let mut data = vec![0u8; width * height];
        reader
            .read_exact(&mut data)
            .map_err(|e| Error::validation(format!("PGM pixel data: {e}")))?;
        LabelMap::new(height, width, data)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_pgm(file)
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}
