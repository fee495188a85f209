//! MSB-first fixed-width bit packing.

/// Appends values of a fixed bit width to a byte buffer, most significant
/// bit first. The final partial byte is zero padded.
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    acc_bits: u32,
}

impl BitWriter {
    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bytes),
            acc: 0,
            acc_bits: 0,
        }
    }

    /// Writes the low `width` bits of `value`. `width` must be in `1..=32`.
    #[inline]
    pub fn write(&mut self, value: u32, width: u32) {
        debug_assert!((1..=32).contains(&width));
        debug_assert!(width == 32 || value >> width == 0);
        self.acc = (self.acc << width) | value as u64;
        self.acc_bits += width;
        while self.acc_bits >= 8 {
            self.acc_bits -= 8;
            self.bytes.push((self.acc >> self.acc_bits) as u8);
        }
        self.acc &= (1u64 << self.acc_bits) - 1;
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.acc_bits > 0 {
            self.bytes.push((self.acc << (8 - self.acc_bits)) as u8);
        }
        self.bytes
    }
}

/// Reads fixed-width values written by [`BitWriter`].
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    acc_bits: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            acc: 0,
            acc_bits: 0,
        }
    }

    /// Next `width`-bit value, or `None` when the buffer is exhausted.
    #[inline]
    pub fn read(&mut self, width: u32) -> Option<u32> {
        while self.acc_bits < width {
            let b = *self.bytes.get(self.pos)?;
            self.pos += 1;
            self.acc = (self.acc << 8) | b as u64;
            self.acc_bits += 8;
        }
        self.acc_bits -= width;
        let v = (self.acc >> self.acc_bits) as u32 & (((1u64 << width) - 1) as u32);
        self.acc &= (1u64 << self.acc_bits) - 1;
        Some(v)
    }

    /// Bits buffered but not yet consumed, plus the unread bytes.
    pub fn remaining_bits(&self) -> usize {
        self.acc_bits as usize + 8 * (self.bytes.len() - self.pos)
    }

    /// True when every unconsumed bit is zero.
    pub fn rest_is_zero(&self) -> bool {
        self.acc == 0 && self.bytes[self.pos..].iter().all(|&b| b == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bit_is_msb() {
        let mut w = BitWriter::with_capacity(1);
        w.write(1, 1);
        assert_eq!(w.finish(), vec![0b1000_0000]);
    }

    #[test]
    fn mixed_widths_roundtrip() {
        let vals = [
            (5u32, 3u32),
            (0, 1),
            (1023, 10),
            (65535, 16),
            (1, 2),
            (0xdead_beef, 32),
        ];
        let mut w = BitWriter::with_capacity(16);
        for &(v, b) in &vals {
            w.write(v, b);
        }
        let bytes = w.finish();
        assert_eq!(bytes.len(), (3 + 1 + 10 + 16 + 2 + 32usize).div_ceil(8));
        let mut r = BitReader::new(&bytes);
        for &(v, b) in &vals {
            assert_eq!(r.read(b), Some(v));
        }
        assert!(r.rest_is_zero());
    }

    #[test]
    fn known_layout() {
        let mut w = BitWriter::with_capacity(2);
        for v in [0b10u32, 0b01, 0b11, 0b00, 0b01] {
            w.write(v, 2);
        }
        assert_eq!(w.finish(), vec![0b1001_1100, 0b0100_0000]);
    }

    #[test]
    fn reader_stops_at_end() {
        let mut r = BitReader::new(&[0xff]);
        assert_eq!(r.read(6), Some(0b11_1111));
        assert_eq!(r.read(3), None);
    }
}
