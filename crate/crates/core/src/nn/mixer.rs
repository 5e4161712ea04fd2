use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

/// Latent token mixer: a per-channel linear map along the token axis
/// (`L_in -> L_out`) followed by a per-token linear map along channels
/// (`C_in -> C_out`).
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub token_down: Linear,
    pub channel_up: Linear,
}

impl TokenMixer {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        (tokens_in, tokens_out): (usize, usize),
        (channels_in, channels_out): (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if tokens_out > tokens_in {
            return Err(Error::config(path, format!("token count must not grow ({tokens_in} -> {tokens_out})")));
        }
        if channels_out < channels_in {
            return Err(Error::config(path, format!("channel count must not shrink ({channels_in} -> {channels_out})")));
        }
        Ok(TokenMixer {
            token_down: Linear::new(store, &format!("{path}.token_down"), tokens_in, tokens_out, true, seed)?,
            channel_up: Linear::new(store, &format!("{path}.channel_up"), channels_in, channels_out, true, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[1] != self.token_down.in_dim || s[2] != self.channel_up.in_dim {
            return Err(Error::shape(format!(
                "token mixer expects [B, {}, {}], got {s:?}",
                self.token_down.in_dim, self.channel_up.in_dim
            )));
        }
        let t = g.permute(z, &[0, 2, 1])?;
        let t = self.token_down.forward(g, store, t)?;
        let t = g.permute(t, &[0, 2, 1])?;
        self.channel_up.forward(g, store, t)
    }
}
