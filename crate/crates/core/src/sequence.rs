//! Prompt+response embedding sequences.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One concatenated prompt+response sequence of backbone hidden states.
///
/// Rows `0..prompt_len` are the prompt; response tokens follow contiguously
/// and padding, if any, forms a trailing suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Tensor,
    response_mask: Vec<bool>,
    prompt_len: usize,
    pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(
        embeddings: Tensor,
        prompt_len: usize,
        response_mask: Vec<bool>,
        pad_mask: Vec<bool>,
    ) -> Result<Self> {
        let Some((len, _)) = embeddings.shape2().filter(|_| embeddings.rank() == 2) else {
            return Err(Error::data(format!(
                "embeddings must be L×d, got dims {:?}",
                embeddings.dims()
            )));
        };
        if response_mask.len() != len || pad_mask.len() != len {
            return Err(Error::data(format!(
                "mask lengths {}/{} do not match sequence length {len}",
                response_mask.len(),
                pad_mask.len()
            )));
        }
        if prompt_len == 0 {
            return Err(Error::data("prompt_len must be at least 1"));
        }
        let n_resp = response_mask.iter().filter(|&&m| m).count();
        if n_resp == 0 {
            return Err(Error::data("response is empty"));
        }
        if response_mask[..prompt_len.min(len)].iter().any(|&m| m) {
            return Err(Error::data("response token inside the prompt"));
        }
        if prompt_len + n_resp > len {
            return Err(Error::data(format!(
                "prompt_len {prompt_len} + response {n_resp} exceeds length {len}"
            )));
        }
        if response_mask.iter().zip(&pad_mask).any(|(&r, &p)| r && !p) {
            return Err(Error::data("response token marked as padding"));
        }
        let real = pad_mask.iter().take_while(|&&p| p).count();
        if pad_mask[real..].iter().any(|&p| p) {
            return Err(Error::data("padding is not a contiguous suffix"));
        }
        if real < prompt_len {
            return Err(Error::data("prompt token marked as padding"));
        }
        Ok(TokenSequence {
            embeddings,
            response_mask,
            prompt_len,
            pad_mask,
        })
    }

    /// Unpadded sequence whose response is every row from `prompt_len` on.
    pub fn from_prompt_response(embeddings: Tensor, prompt_len: usize) -> Result<Self> {
        let len = embeddings.dims()[0];
        let response = (0..len).map(|t| t >= prompt_len).collect();
        Self::new(embeddings, prompt_len, response, vec![true; len])
    }

    /// Appends `rows` padded rows of `fill` values.
    pub fn padded(&self, rows: usize, fill: f64) -> Self {
        let d = self.dim();
        let mut data = self.embeddings.data().to_vec();
        data.extend(std::iter::repeat(fill).take(rows * d));
        let mut response_mask = self.response_mask.clone();
        response_mask.extend(std::iter::repeat(false).take(rows));
        let mut pad_mask = self.pad_mask.clone();
        pad_mask.extend(std::iter::repeat(false).take(rows));
        TokenSequence {
            embeddings: Tensor::new(vec![self.len() + rows, d], data).expect("dims match"),
            response_mask,
            prompt_len: self.prompt_len,
            pad_mask,
        }
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Mutable access to the raw rows; masks are left untouched.
    pub fn embeddings_mut(&mut self) -> &mut [f64] {
        self.embeddings.data_mut()
    }

    pub fn response_mask(&self) -> &[bool] {
        &self.response_mask
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|t| t < self.prompt_len).collect()
    }

    /// Index of the final response token.
    pub fn last_response_index(&self) -> usize {
        self.response_mask.iter().rposition(|&m| m).expect("validated non-empty")
    }

    pub fn len(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[1]
    }

    pub fn response_len(&self) -> usize {
        self.response_mask.iter().filter(|&&m| m).count()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(l: usize) -> Tensor {
        Tensor::new(vec![l, 2], (0..2 * l).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn builds_contiguous_response() {
        let s = TokenSequence::from_prompt_response(emb(5), 2).unwrap();
        assert_eq!(s.response_mask(), &[false, false, true, true, true]);
        assert_eq!(s.last_response_index(), 4);
        assert_eq!(s.response_len(), 3);
    }

    #[test]
    fn rejects_empty_response() {
        assert!(TokenSequence::from_prompt_response(emb(3), 3).is_err());
    }

    #[test]
    fn rejects_zero_prompt() {
        assert!(TokenSequence::from_prompt_response(emb(3), 0).is_err());
    }

    #[test]
    fn rejects_interior_padding() {
        let r = TokenSequence::new(
            emb(4),
            1,
            vec![false, true, false, false],
            vec![true, true, false, true],
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_padded_response() {
        let r = TokenSequence::new(emb(3), 1, vec![false, true, true], vec![true, true, false]);
        assert!(r.is_err());
    }

    #[test]
    fn padding_keeps_masks_aligned() {
        let s = TokenSequence::from_prompt_response(emb(3), 1).unwrap().padded(2, 7.0);
        assert_eq!(s.len(), 5);
        assert_eq!(s.pad_mask(), &[true, true, true, false, false]);
        assert_eq!(s.real_len(), 3);
        assert_eq!(s.last_response_index(), 2);
    }
}
