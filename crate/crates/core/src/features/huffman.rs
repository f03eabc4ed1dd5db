//! Compressibility as total Huffman-coded length.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::hash::Hash;

use super::FeatureError;

/// Total bits needed to encode `symbols` with an optimal prefix code built
/// from their own frequencies.
///
/// A single-symbol alphabet still needs a one-bit codeword per symbol.
pub fn huffman_length<T: Eq + Hash>(symbols: &[T]) -> Result<u64, FeatureError> {
    if symbols.is_empty() {
        return Err(FeatureError::EmptyInput("huffman_length"));
    }
    let mut freq: HashMap<&T, u64> = HashMap::new();
    for s in symbols {
        *freq.entry(s).or_default() += 1;
    }
    if freq.len() == 1 {
        return Ok(symbols.len() as u64);
    }
    // Each merge adds one bit to every symbol below it, so the total length
    // is the sum of all internal node weights.
    let mut heap: BinaryHeap<Reverse<u64>> = freq.into_values().map(Reverse).collect();
    let mut bits = 0;
    while heap.len() > 1 {
        let Reverse(a) = heap.pop().unwrap();
        let Reverse(b) = heap.pop().unwrap();
        bits += a + b;
        heap.push(Reverse(a + b));
    }
    Ok(bits)
}
