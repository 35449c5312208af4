//! Frame-level causal masks and the key layout of temporal attention.

use far_tensor::AttnMask;

use crate::error::{contract, Result};

/// Block mask over `t * tokens_per_frame` positions; `true` means "may attend".
///
/// Tokens attend bidirectionally within their own frame. A target frame also sees every
/// earlier frame. A frame flagged as reference sees only itself, which makes its keys and
/// values a function of that frame alone and therefore cacheable.
pub fn build_causal_mask(
    t: usize,
    tokens_per_frame: usize,
    ref_flags: Option<&[bool]>,
) -> Result<Vec<bool>> {
    if t == 0 || tokens_per_frame == 0 {
        return contract("causal mask needs at least one frame and one token per frame");
    }
    if let Some(f) = ref_flags {
        if f.len() != t {
            return contract(format!("{} reference flags for {t} frames", f.len()));
        }
    }
    let l = t * tokens_per_frame;
    let mut mask = vec![false; l * l];
    for q in 0..l {
        let fq = q / tokens_per_frame;
        let is_ref = ref_flags.is_some_and(|f| f[fq]);
        for k in 0..l {
            let fk = k / tokens_per_frame;
            mask[q * l + k] = if is_ref { fk == fq } else { fk <= fq };
        }
    }
    Ok(mask)
}

/// Per-frame facts the temporal attention layout needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameFlags {
    pub is_ref: bool,
    /// Conditioning withheld: prompt keys of this frame are masked.
    pub drop_cond: bool,
}

/// Key order for every temporal attention layer of one forward pass:
/// `[prompt tokens of the current frames | cached past frames | current frames]`.
pub(crate) struct TemporalLayout {
    pub lq: usize,
    pub lk: usize,
    pub mask: AttnMask,
    /// Index into a flattened `[heads, max_t + 1]` bias table for every `(head, query, key)`.
    pub bias_index: Vec<usize>,
}

pub(crate) struct LayoutSpec<'a> {
    pub batch: usize,
    pub views: usize,
    pub tokens: usize,
    pub prompt_len: usize,
    pub heads: usize,
    pub max_t: usize,
    /// Positions of the current frames (shared by the batch).
    pub positions: &'a [usize],
    /// Positions of cached past frames (batch size 1 only).
    pub past_positions: &'a [usize],
    /// `[batch * frames]` flags in `(b, t)` order.
    pub flags: &'a [FrameFlags],
    /// `[batch * frames * prompt_len]` prompt token validity.
    pub prompt_valid: &'a [bool],
}

impl TemporalLayout {
    pub fn new(s: &LayoutSpec) -> Result<Self> {
        let t = s.positions.len();
        let n_past = s.past_positions.len();
        let (p, st) = (s.prompt_len, s.tokens);
        if s.flags.len() != s.batch * t || s.prompt_valid.len() != s.batch * t * p {
            return contract(
                "temporal layout: flag or prompt-validity lengths do not match the batch",
            );
        }
        if n_past > 0 && s.batch != 1 {
            return contract("cached past frames require batch size 1");
        }
        let lq = t * st;
        let lk = t * p + n_past * st + t * st;
        let past_start = t * p;
        let cur_start = past_start + n_past * st;
        let mut masks = Vec::with_capacity(s.batch);
        for b in 0..s.batch {
            let mut m = vec![false; lq * lk];
            for tq in 0..t {
                let flags = s.flags[b * t + tq];
                for q in tq * st..(tq + 1) * st {
                    let row = &mut m[q * lk..(q + 1) * lk];
                    if !flags.drop_cond {
                        for j in 0..p {
                            row[tq * p + j] = s.prompt_valid[(b * t + tq) * p + j];
                        }
                    }
                    if !flags.is_ref {
                        row[past_start..cur_start]
                            .iter_mut()
                            .for_each(|x| *x = true);
                    }
                    for tk in 0..t {
                        if tk == tq || (!flags.is_ref && tk < tq) {
                            row[cur_start + tk * st..cur_start + (tk + 1) * st]
                                .iter_mut()
                                .for_each(|x| *x = true);
                        }
                    }
                }
            }
            masks.push(m);
        }
        let assign = (0..s.batch * s.views).map(|g| g / s.views).collect();
        let mask = AttnMask::per_group(lq, lk, masks, assign)?;

        let bucket = |dq: usize, dk: usize| dq.saturating_sub(dk).min(s.max_t - 1);
        let mut slots = vec![s.max_t; lq * lk];
        for tq in 0..t {
            let pq = s.positions[tq];
            let mut row = vec![s.max_t; lk];
            for (i, &pk) in s.past_positions.iter().enumerate() {
                row[past_start + i * st..past_start + (i + 1) * st].fill(bucket(pq, pk));
            }
            for (tk, &pk) in s.positions.iter().enumerate() {
                row[cur_start + tk * st..cur_start + (tk + 1) * st].fill(bucket(pq, pk));
            }
            for q in tq * st..(tq + 1) * st {
                slots[q * lk..(q + 1) * lk].copy_from_slice(&row);
            }
        }
        let stride = s.max_t + 1;
        let bias_index = (0..s.heads)
            .flat_map(|h| slots.iter().map(move |&k| h * stride + k))
            .collect();
        Ok(TemporalLayout {
            lq,
            lk,
            mask,
            bias_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn as_int(m: &[bool]) -> Vec<u8> {
        m.iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn two_frames_one_token() {
        assert_eq!(
            as_int(&build_causal_mask(2, 1, None).unwrap()),
            vec![1, 0, 1, 1]
        );
    }

    #[test]
    fn single_frame_is_all_ones() {
        assert!(build_causal_mask(1, 5, None).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn three_frames_two_tokens_block_lower_triangular() {
        let m = build_causal_mask(3, 2, None).unwrap();
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(m[q * 6 + k], k / 2 <= q / 2, "({q},{k})");
            }
        }
    }

    #[test]
    fn reference_frames_see_only_themselves() {
        let m = build_causal_mask(3, 1, Some(&[true, true, false])).unwrap();
        assert_eq!(as_int(&m), vec![1, 0, 0, 0, 1, 0, 1, 1, 1]);
    }

    #[test]
    fn layout_masks_prompt_per_frame() {
        let flags = [
            FrameFlags {
                is_ref: true,
                drop_cond: false,
            },
            FrameFlags {
                is_ref: false,
                drop_cond: true,
            },
        ];
        let valid = [true, false, true, true];
        let l = TemporalLayout::new(&LayoutSpec {
            batch: 1,
            views: 2,
            tokens: 1,
            prompt_len: 2,
            heads: 1,
            max_t: 4,
            positions: &[0, 1],
            past_positions: &[],
            flags: &flags,
            prompt_valid: &valid,
        })
        .unwrap();
        assert_eq!((l.lq, l.lk), (2, 6));
        // Frame 0 (reference): own valid prompt token, own frame token.
        assert_eq!(as_int(&l.mask.for_group(0)[..6]), vec![1, 0, 0, 0, 1, 0]);
        // Frame 1 (target, conditioning dropped): no prompt, both frames.
        assert_eq!(as_int(&l.mask.for_group(1)[6..]), vec![0, 0, 0, 0, 1, 1]);
        // Prompt keys use the dedicated bucket 4; frame distance 1 uses bucket 1.
        assert_eq!(&l.bias_index[6..], &[4, 4, 4, 4, 1, 0]);
    }
}
