use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Little-endian primitives for the binary file formats.
pub(crate) trait BinWrite: Write {
    fn put_u32(&mut self, v: u32) -> Result<()> {
        Ok(self.write_all(&v.to_le_bytes())?)
    }

    fn put_u64(&mut self, v: u64) -> Result<()> {
        Ok(self.write_all(&v.to_le_bytes())?)
    }

    fn put_f32(&mut self, v: f32) -> Result<()> {
        Ok(self.write_all(&v.to_le_bytes())?)
    }

    fn put_f32s(&mut self, vs: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.write_all(&buf)?)
    }
}

impl<W: Write + ?Sized> BinWrite for W {}

pub(crate) trait BinRead: Read {
    fn get_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b).map_err(truncated)?;
        Ok(u32::from_le_bytes(b))
    }

    fn get_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b).map_err(truncated)?;
        Ok(u64::from_le_bytes(b))
    }

    fn get_f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b).map_err(truncated)?;
        Ok(f32::from_le_bytes(b))
    }

    fn get_f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b).map_err(truncated)?;
        if &b != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&b)
            )));
        }
        Ok(())
    }
}

impl<R: Read + ?Sized> BinRead for R {}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}
