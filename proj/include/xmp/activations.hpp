#pragma once

// Residual-stream activation dumps: a tensor file holding an N x d matrix
// plus a CSV sidecar "<file>.tags.csv" with one row per activation:
//   doc,pos,token,tag
// where tag is bos | visual | text.

#include <filesystem>
#include <vector>

#include "xmp/dense.hpp"
#include "xmp/tinylm.hpp"
#include "xmp/tokenizer.hpp"

namespace xmp {

struct PositionTag {
    int doc = 0;
    int pos = 0;
    TokenId token = 0;
    PositionGroup group = PositionGroup::Text;
};

struct ActivationDump {
    int layer = 0;
    MatF acts;  // N x d_model
    std::vector<PositionTag> tags;

    /// Token sequence of each document, rebuilt from the tags.
    std::vector<Tokens> documents() const;
    /// Rows not tagged bos.
    std::vector<Eigen::Index> non_bos_rows() const;
    MatF rows(const std::vector<Eigen::Index>& idx) const;
};

std::filesystem::path sidecar_path(const std::filesystem::path& dump);
void save_activation_dump(const std::filesystem::path& path, const ActivationDump& dump);
ActivationDump load_activation_dump(const std::filesystem::path& path);

/// Runs the LM over documents ([BOS] + tokens + [EOS]) and collects the
/// residual stream for every requested layer, one dump per layer.
std::vector<ActivationDump> collect_text_activations(const LMWeights<float>& lm, const std::vector<Tokens>& docs,
                                                     const std::vector<int>& layers);

}  // namespace xmp
