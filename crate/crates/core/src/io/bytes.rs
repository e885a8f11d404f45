//! Little-endian encoding helpers for checkpoint sections.

use crate::scene::Vec3;

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed slice.
    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn vec3(&mut self, v: &Vec3) {
        for x in v.iter() {
            self.f64(*x);
        }
    }

    pub fn vec3s(&mut self, v: &[Vec3]) {
        self.u64(v.len() as u64);
        for x in v {
            self.vec3(x);
        }
    }

    pub fn bools(&mut self, v: &[bool]) {
        self.u64(v.len() as u64);
        self.buf.extend(v.iter().map(|b| *b as u8));
    }
}

/// Reader over one section payload; `None` means the payload ran short.
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self, elem: usize) -> Option<usize> {
        let n = usize::try_from(self.u64()?).ok()?;
        // reject lengths that cannot fit in the remaining payload
        (n.checked_mul(elem)? <= self.data.len() - self.pos).then_some(n)
    }

    pub fn f64s(&mut self) -> Option<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn vec3(&mut self) -> Option<Vec3> {
        Some(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    pub fn vec3s(&mut self) -> Option<Vec<Vec3>> {
        let n = self.len(24)?;
        (0..n).map(|_| self.vec3()).collect()
    }

    pub fn bools(&mut self) -> Option<Vec<bool>> {
        let n = self.len(1)?;
        self.take(n).map(|b| b.iter().map(|x| *x != 0).collect())
    }
}
