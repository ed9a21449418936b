//! Model shape configuration.

use crate::autograd::TileLayout;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How a (user, product) pair is turned into a modification of a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    /// Adds `W_u u + W_p p` to the pre-activation.
    Bias,
    /// Generates a full replacement weight matrix.
    Matrix,
    /// Generates a tiled sigmoid gate that scales the original weight.
    Chim,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 3] = [Self::Bias, Self::Matrix, Self::Chim];

    pub fn label(self) -> &'static str {
        match self {
            Self::Bias => "bias",
            Self::Matrix => "matrix",
            Self::Chim => "chim",
        }
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bias" => Ok(Self::Bias),
            "matrix" => Ok(Self::Matrix),
            "chim" => Ok(Self::Chim),
            other => Err(Error::config(format!(
                "unknown representation `{other}` (expected bias, matrix or chim)"
            ))),
        }
    }
}

/// One of the four affine maps that can receive attribute information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionSite {
    Embedding,
    Encoder,
    Attention,
    Classifier,
}

impl InjectionSite {
    pub const ALL: [InjectionSite; 4] = [
        Self::Embedding,
        Self::Encoder,
        Self::Attention,
        Self::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::Encoder => "encoder",
            Self::Attention => "attention",
            Self::Classifier => "classifier",
        }
    }

    /// Short grid label: embed, encode, attend, classify.
    pub fn label(self) -> &'static str {
        match self {
            Self::Embedding => "embed",
            Self::Encoder => "encode",
            Self::Attention => "attend",
            Self::Classifier => "classify",
        }
    }

    pub fn position(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }
}

impl fmt::Display for InjectionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding" | "embed" | "emb" => Ok(Self::Embedding),
            "encoder" | "encode" | "enc" => Ok(Self::Encoder),
            "attention" | "attend" | "att" => Ok(Self::Attention),
            "classifier" | "classify" | "cls" => Ok(Self::Classifier),
            other => Err(Error::config(format!(
                "unknown injection site `{other}` (expected embedding, encoder, attention or classifier)"
            ))),
        }
    }
}

/// Attribute representation and where it is injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeConfig {
    pub kind: RepresentationKind,
    /// Sorted, deduplicated, non-empty.
    pub sites: Vec<InjectionSite>,
    pub user_dim: usize,
    pub product_dim: usize,
    /// Row chunk factor.
    pub c1: usize,
    /// Column chunk factor.
    pub c2: usize,
    /// Row chunk factor used at the classifier, whose row count is the
    /// number of classes.
    pub classifier_c1: usize,
    pub layout: TileLayout,
}

impl AttributeConfig {
    pub fn new(kind: RepresentationKind, sites: &[InjectionSite], dim: usize) -> Self {
        let mut sites = sites.to_vec();
        sites.sort();
        sites.dedup();
        Self {
            kind,
            sites,
            user_dim: dim,
            product_dim: dim,
            c1: 1,
            c2: 1,
            classifier_c1: 1,
            layout: TileLayout::Periodic,
        }
    }

    pub fn with_chunks(mut self, c1: usize, c2: usize) -> Self {
        self.c1 = c1;
        self.c2 = c2;
        self
    }

    pub fn has_site(&self, site: InjectionSite) -> bool {
        self.sites.contains(&site)
    }

    pub fn concat_dim(&self) -> usize {
        self.user_dim + self.product_dim
    }

    /// True when this configuration falls inside the grid the method was
    /// evaluated on (bias representations only at the attention site).
    pub fn in_evaluated_grid(&self) -> bool {
        self.kind != RepresentationKind::Bias || self.sites == [InjectionSite::Attention]
    }
}

/// Dimensions and options that fully determine parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the word-vector table.
    pub word_dim: usize,
    /// Output width of the embedding nonlinearity.
    pub embed_dim: usize,
    /// Concatenated BiLSTM width; each direction gets half.
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub num_classes: usize,
    /// Rows of the user table, including the unknown row 0.
    pub num_users: usize,
    /// Rows of the product table, including the unknown row 0.
    pub num_products: usize,
    pub attributes: Option<AttributeConfig>,
}

impl ModelConfig {
    /// A configuration where every width equals `dim`.
    pub fn uniform(dim: usize, vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            word_dim: dim,
            embed_dim: dim,
            hidden_dim: dim,
            attention_dim: dim,
            num_classes,
            num_users: 1,
            num_products: 1,
            attributes: None,
        }
    }

    pub fn with_attributes(mut self, attrs: AttributeConfig, users: usize, products: usize) -> Self {
        self.attributes = Some(attrs);
        self.num_users = users;
        self.num_products = products;
        self
    }

    pub fn direction_dim(&self) -> usize {
        self.hidden_dim / 2
    }

    /// `(rows, cols)` of the weight matrix at a site. The encoder value is
    /// per direction.
    pub fn site_dims(&self, site: InjectionSite) -> (usize, usize) {
        let hd = self.direction_dim();
        match site {
            InjectionSite::Embedding => (self.embed_dim, self.word_dim),
            InjectionSite::Encoder => (4 * hd, self.embed_dim + hd),
            InjectionSite::Attention => (self.attention_dim, 2 * hd),
            InjectionSite::Classifier => (self.num_classes, 2 * hd),
        }
    }

    /// `(c1, c2)` chunk factors used at a site.
    pub fn site_chunks(&self, site: InjectionSite) -> (usize, usize) {
        match &self.attributes {
            None => (1, 1),
            Some(a) if site == InjectionSite::Classifier => (a.classifier_c1, a.c2),
            Some(a) => (a.c1, a.c2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("num_users", self.num_users),
            ("num_products", self.num_products),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "hidden_dim {} must be even (split across two directions)",
                self.hidden_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        let Some(a) = &self.attributes else {
            return Ok(());
        };
        if a.sites.is_empty() {
            return Err(Error::config("attribute configuration needs at least one site"));
        }
        if a.user_dim == 0 || a.product_dim == 0 {
            return Err(Error::config("user_dim and product_dim must be positive"));
        }
        if a.kind == RepresentationKind::Chim {
            for &site in &a.sites {
                let (d1, d2) = self.site_dims(site);
                let (c1, c2) = self.site_chunks(site);
                if c1 == 0 || c2 == 0 {
                    return Err(Error::config("chunk factors must be at least 1"));
                }
                if d1 % c1 != 0 || d2 % c2 != 0 {
                    return Err(Error::config(format!(
                        "{site} weight is {d1}x{d2}, not divisible by chunk factors {c1}x{c2}"
                    )));
                }
            }
        }
        Ok(())
    }
}
