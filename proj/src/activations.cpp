#include "xmp/activations.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "xmp/tensor_io.hpp"

namespace xmp {

std::vector<Tokens> ActivationDump::documents() const
{
    std::vector<Tokens> docs;
    for (const auto& t : tags) {
        if (t.doc < 0)
            throw FormatError("negative document index");
        if (static_cast<std::size_t>(t.doc) >= docs.size())
            docs.resize(static_cast<std::size_t>(t.doc) + 1);
        auto& d = docs[static_cast<std::size_t>(t.doc)];
        if (static_cast<std::size_t>(t.pos) >= d.size())
            d.resize(static_cast<std::size_t>(t.pos) + 1, Tokenizer::kPad);
        d[static_cast<std::size_t>(t.pos)] = t.token;
    }
    return docs;
}

std::vector<Eigen::Index> ActivationDump::non_bos_rows() const
{
    std::vector<Eigen::Index> out;
    for (std::size_t i = 0; i < tags.size(); ++i)
        if (tags[i].group != PositionGroup::Bos)
            out.push_back(static_cast<Eigen::Index>(i));
    return out;
}

MatF ActivationDump::rows(const std::vector<Eigen::Index>& idx) const
{
    MatF out(static_cast<Eigen::Index>(idx.size()), acts.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = acts.row(idx[i]);
    return out;
}

std::filesystem::path sidecar_path(const std::filesystem::path& dump)
{
    return dump.string() + ".tags.csv";
}

void save_activation_dump(const std::filesystem::path& path, const ActivationDump& dump)
{
    if (static_cast<std::size_t>(dump.acts.rows()) != dump.tags.size())
        throw ShapeMismatch("activation dump: tag count does not match rows");
    TensorFile f;
    f.config = {{"kind", "activations"}, {"layer", dump.layer}};
    f.tensors.emplace_back("activations", dump.acts);
    save_tensor_file(path, f);
    std::ofstream out(sidecar_path(path), std::ios::trunc);
    if (!out)
        throw Error("cannot write " + sidecar_path(path).string());
    out << "doc,pos,token,tag\n";
    for (const auto& t : dump.tags)
        out << t.doc << ',' << t.pos << ',' << t.token << ',' << group_tag_name(t.group) << '\n';
}

ActivationDump load_activation_dump(const std::filesystem::path& path)
{
    auto f = load_tensor_file(path);
    if (f.config.value("kind", "") != "activations")
        throw FormatError(path.string() + " is not an activation dump");
    ActivationDump d;
    d.layer = f.config.at("layer");
    d.acts = f.at("activations");
    std::ifstream in(sidecar_path(path));
    if (!in)
        throw Error("missing sidecar " + sidecar_path(path).string());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream is(line);
        std::string doc, pos, tok, tag;
        std::getline(is, doc, ',');
        std::getline(is, pos, ',');
        std::getline(is, tok, ',');
        std::getline(is, tag, ',');
        PositionTag t{std::stoi(doc), std::stoi(pos), std::stoi(tok), PositionGroup::Text};
        if (tag == "bos")
            t.group = PositionGroup::Bos;
        else if (tag == "visual")
            t.group = PositionGroup::Visual;
        else if (tag != "text")
            throw FormatError("unknown tag '" + tag + "'");
        d.tags.push_back(t);
    }
    if (d.tags.size() != static_cast<std::size_t>(d.acts.rows()))
        throw FormatError("sidecar row count does not match activations");
    return d;
}

std::vector<ActivationDump> collect_text_activations(const LMWeights<float>& lm, const std::vector<Tokens>& docs,
                                                     const std::vector<int>& layers)
{
    std::size_t total = 0;
    for (const auto& d : docs)
        total += d.size() + 2;
    std::vector<ActivationDump> out(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        out[i].layer = layers[i];
        out[i].acts.resize(static_cast<Eigen::Index>(total), lm.cfg.d_model);
    }
    std::set<int> capture(layers.begin(), layers.end());
    Eigen::Index row = 0;
    std::vector<PositionTag> tags;
    tags.reserve(total);
    for (std::size_t di = 0; di < docs.size(); ++di) {
        Tokens seq = wrap_document(docs[di]);
        auto res = lm_forward(lm, embed_tokens(lm, seq), capture);
        for (std::size_t i = 0; i < layers.size(); ++i)
            out[i].acts.middleRows(row, static_cast<Eigen::Index>(seq.size())) = res.record.layers.at(layers[i]);
        for (std::size_t p = 0; p < seq.size(); ++p)
            tags.push_back({static_cast<int>(di), static_cast<int>(p), seq[p],
                            p == 0 ? PositionGroup::Bos : PositionGroup::Text});
        row += static_cast<Eigen::Index>(seq.size());
    }
    for (auto& d : out)
        d.tags = tags;
    return out;
}

}  // namespace xmp
