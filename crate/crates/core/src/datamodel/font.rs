//! A 5x7 bitmap font covering `A-Z` and `0-9`.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Horizontal advance between glyph origins, in font cells.
pub const ADVANCE: usize = GLYPH_W + 1;

pub const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

// Rows top to bottom; bit 4 is the leftmost column.
const GLYPHS: [[u8; 7]; 36] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
    [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
    [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

fn glyph(ch: u8) -> Option<&'static [u8; 7]> {
    ALPHABET.iter().position(|&c| c == ch).map(|i| &GLYPHS[i])
}

/// Whether cell `(col, row)` of the glyph for `ch` is inked.
pub fn cell(ch: u8, col: usize, row: usize) -> bool {
    col < GLYPH_W && row < GLYPH_H && glyph(ch).is_some_and(|g| g[row] >> (GLYPH_W - 1 - col) & 1 == 1)
}

/// Width of a rendered word in font cells.
pub fn word_width(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len * ADVANCE - 1
    }
}

/// Whether the point `(u, v)` in word-local font units falls on ink.
pub fn word_ink(word: &[u8], u: f64, v: f64) -> bool {
    if u < 0.0 || v < 0.0 {
        return false;
    }
    let (col, row) = (u.floor() as usize, v.floor() as usize);
    let idx = col / ADVANCE;
    idx < word.len() && cell(word[idx], col % ADVANCE, row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_glyph_is_inked_and_distinct() {
        for (i, a) in GLYPHS.iter().enumerate() {
            assert!(a.iter().any(|&r| r != 0));
            assert!(a.iter().all(|&r| r < 32));
            for b in &GLYPHS[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn word_layout() {
        assert_eq!(word_width(3), 17);
        assert!(word_ink(b"T", 2.5, 6.5));
        assert!(!word_ink(b"T", 0.5, 6.5));
        assert!(!word_ink(b"TT", 5.5, 0.5));
        assert!(word_ink(b"TT", 6.5, 0.5));
        assert!(!word_ink(b"T", 2.5, 7.5));
    }
}
