use num_complex::Complex32;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("access of {len} bytes at {offset:#x} exceeds local memory of {limit} bytes")]
pub struct MemoryError {
    pub offset: u32,
    pub len: u32,
    pub limit: u32,
}

/// Byte-addressed scratchpad of one core. Words are little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalMemory {
    bytes: Vec<u8>,
}

const COMPLEX_BYTES: usize = 8;

impl LocalMemory {
    pub fn new(size: u32) -> Self {
        Self {
            bytes: vec![0; size as usize],
        }
    }

    pub fn len(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn span(&self, offset: u32, len: usize) -> Result<std::ops::Range<usize>, MemoryError> {
        let start = offset as usize;
        let end = start.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => Ok(start..end),
            None => Err(MemoryError {
                offset,
                len: len.min(u32::MAX as usize) as u32,
                limit: self.len(),
            }),
        }
    }

    pub fn read(&self, offset: u32, len: u32) -> Result<&[u8], MemoryError> {
        let r = self.span(offset, len as usize)?;
        Ok(&self.bytes[r])
    }

    pub fn write(&mut self, offset: u32, data: &[u8]) -> Result<(), MemoryError> {
        let r = self.span(offset, data.len())?;
        self.bytes[r].copy_from_slice(data);
        Ok(())
    }

    pub fn read_i32(&self, offset: u32) -> Result<i32, MemoryError> {
        let b = self.read(offset, 4)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn write_i32(&mut self, offset: u32, value: i32) -> Result<(), MemoryError> {
        self.write(offset, &value.to_le_bytes())
    }

    pub fn read_f32s(&self, offset: u32, count: usize) -> Result<Vec<f32>, MemoryError> {
        let r = self.span(offset, count * 4)?;
        Ok(self.bytes[r]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn write_f32s(&mut self, offset: u32, values: &[f32]) -> Result<(), MemoryError> {
        let r = self.span(offset, values.len() * 4)?;
        for (dst, v) in self.bytes[r].chunks_exact_mut(4).zip(values) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn read_complex(&self, offset: u32, count: usize) -> Result<Vec<Complex32>, MemoryError> {
        let r = self.span(offset, count * COMPLEX_BYTES)?;
        Ok(self.bytes[r]
            .chunks_exact(COMPLEX_BYTES)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                )
            })
            .collect())
    }

    pub fn write_complex(&mut self, offset: u32, values: &[Complex32]) -> Result<(), MemoryError> {
        let r = self.span(offset, values.len() * COMPLEX_BYTES)?;
        for (dst, v) in self.bytes[r].chunks_exact_mut(COMPLEX_BYTES).zip(values) {
            dst[..4].copy_from_slice(&v.re.to_le_bytes());
            dst[4..].copy_from_slice(&v.im.to_le_bytes());
        }
        Ok(())
    }
}

/// Serializes complex samples in the in-memory layout used by [`LocalMemory`].
pub fn complex_to_bytes(values: &[Complex32]) -> Vec<u8> {
    let mut m = LocalMemory::new((values.len() * COMPLEX_BYTES) as u32);
    m.write_complex(0, values).expect("buffer sized to fit");
    m.bytes
}
