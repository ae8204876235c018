use ndarray::Array2;

use super::ModelError;
use crate::tokenizer::PAD;

/// A padded batch of source/target pairs.
///
/// `decoder_input` is the target shifted right with PAD as the start token.
/// `encoder_mask` is stored explicitly so that ids under a false mask entry
/// never influence the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub encoder_ids: Array2<u32>,
    pub encoder_mask: Array2<bool>,
    pub decoder_input: Array2<u32>,
    pub targets: Array2<u32>,
}

impl Batch {
    /// Builds a batch from `(source, target)` id sequences. Targets should
    /// already carry their EOS.
    pub fn from_pairs<S: AsRef<[u32]>, T: AsRef<[u32]>>(pairs: &[(S, T)]) -> Batch {
        let b = pairs.len();
        let enc_len = pairs.iter().map(|(s, _)| s.as_ref().len()).max().unwrap_or(0).max(1);
        let dec_len = pairs.iter().map(|(_, t)| t.as_ref().len()).max().unwrap_or(0).max(1);
        let mut encoder_ids = Array2::from_elem((b, enc_len), PAD);
        let mut decoder_input = Array2::from_elem((b, dec_len), PAD);
        let mut targets = Array2::from_elem((b, dec_len), PAD);
        for (row, (src, tgt)) in pairs.iter().enumerate() {
            for (j, &id) in src.as_ref().iter().enumerate() {
                encoder_ids[[row, j]] = id;
            }
            for (j, &id) in tgt.as_ref().iter().enumerate() {
                targets[[row, j]] = id;
                if j + 1 < dec_len {
                    decoder_input[[row, j + 1]] = id;
                }
            }
        }
        let encoder_mask = encoder_ids.mapv(|id| id != PAD);
        Batch {
            encoder_ids,
            encoder_mask,
            decoder_input,
            targets,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.encoder_ids.nrows()
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_ids.ncols()
    }

    pub fn decoder_len(&self) -> usize {
        self.decoder_input.ncols()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), ModelError> {
        let b = self.batch_size();
        if self.encoder_mask.dim() != self.encoder_ids.dim()
            || self.decoder_input.nrows() != b
            || self.targets.dim() != self.decoder_input.dim()
        {
            return Err(ModelError::ShapeMismatch(format!(
                "encoder {:?}, mask {:?}, decoder {:?}, targets {:?}",
                self.encoder_ids.dim(),
                self.encoder_mask.dim(),
                self.decoder_input.dim(),
                self.targets.dim()
            )));
        }
        let too_big = self
            .encoder_ids
            .iter()
            .chain(self.decoder_input.iter())
            .chain(self.targets.iter())
            .find(|&&id| id as usize >= vocab_size);
        if let Some(&id) = too_big {
            return Err(ModelError::ShapeMismatch(format!(
                "token id {id} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifts_and_pads() {
        let batch = Batch::from_pairs(&[(vec![5, 6, 7], vec![8, 9, 1]), (vec![5], vec![1])]);
        assert_eq!(batch.encoder_ids.row(1).to_vec(), vec![5, 0, 0]);
        assert_eq!(batch.encoder_mask.row(1).to_vec(), vec![true, false, false]);
        assert_eq!(batch.decoder_input.row(0).to_vec(), vec![0, 8, 9]);
        assert_eq!(batch.targets.row(0).to_vec(), vec![8, 9, 1]);
        assert_eq!(batch.decoder_input.row(1).to_vec(), vec![0, 1, 0]);
        assert_eq!(batch.targets.row(1).to_vec(), vec![1, 0, 0]);
        batch.validate(10).unwrap();
        assert!(batch.validate(9).is_err());
    }
}
