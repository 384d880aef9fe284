#include "xmp/synthworld.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "xmp/error.hpp"
#include "xmp/rng.hpp"

namespace xmp {

namespace {

const std::array<std::string, kNumShapes> kShapeNames = {"circle", "square", "triangle", "star"};
const std::array<std::string, kNumColors> kColorNames = {"red", "green", "blue", "yellow"};
const std::array<std::string, kNumCells> kPositionNames = {
    "upper left", "upper middle", "upper right", "middle left", "center",
    "middle right", "lower left", "lower middle", "lower right"};

const std::array<std::array<float, 3>, kNumColors> kPalette = {{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 0.8f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
}};

const std::vector<std::string> kCaptionInstructions = {"Describe the image.", "What is shown?",
                                                       "What do you see?"};

const std::vector<std::string> kSubjects = {"she", "he", "the teacher", "my friend", "the child",
                                            "the artist", "our neighbor", "a student"};
const std::vector<std::string> kVerbs = {"painted", "found", "bought", "liked", "saw",
                                         "drew", "carried", "lost", "wanted", "kept"};
const std::vector<std::string> kNouns = {"wall", "box", "door", "flag", "car", "ball", "kite", "chair",
                                         "hat", "cup", "book", "bag", "lamp", "bike", "shirt", "fence"};
const std::array<std::string, kNumShapes> kShapeFacts = {
    "a circle has no corners.", "a square has four sides.", "a triangle has three sides.",
    "a star can have five points."};
const std::vector<std::string> kRegions = {"upper", "middle", "lower"};
const std::vector<std::string> kSides = {"left", "right"};

constexpr const char* kConsiderPrefix = "Consider the following information: ";

int shape_index(Shape s) { return static_cast<int>(s) - 1; }
int color_index(Color c) { return static_cast<int>(c) - 1; }

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng)
{
    return v[uniform_index(rng, v.size())];
}

bool glyph_mask(Shape s, int y, int x)
{
    const double cx = 3.5, cy = 3.5;
    switch (s) {
    case Shape::Circle:
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= 3.2 * 3.2;
    case Shape::Square:
        return x >= 1 && x <= 6 && y >= 1 && y <= 6;
    case Shape::Triangle:
        return y >= 1 && y <= 6 && std::abs(x - cx) <= 0.5 * y;
    case Shape::Star: {
        bool inside = x >= 1 && x <= 6 && y >= 1 && y <= 6;
        bool plus = (x == 3 || x == 4 || y == 3 || y == 4);
        bool cross = (x == y || x == 7 - y);
        return inside && (plus || cross);
    }
    case Shape::Empty:
        break;
    }
    return false;
}

std::string clause(const CellContent& c, int cell)
{
    return "a " + color_name(c.color) + " " + shape_name(c.shape) + " at " + position_name(cell);
}

std::string join_clauses(const std::vector<std::string>& clauses)
{
    std::string out;
    for (std::size_t i = 0; i < clauses.size(); ++i) {
        if (i)
            out += " and ";
        out += clauses[i];
    }
    return out + ".";
}

// Splits text into words and standalone punctuation, the same way the
// tokenizer does.
std::vector<std::string> split_words(const std::string& text)
{
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string chunk;
    while (is >> chunk) {
        std::size_t end = chunk.size();
        while (end > 0 && std::string_view(".,?:!").find(chunk[end - 1]) != std::string_view::npos)
            --end;
        if (end > 0)
            out.push_back(chunk.substr(0, end));
        for (std::size_t i = end; i < chunk.size(); ++i)
            out.emplace_back(1, chunk[i]);
    }
    return out;
}

std::optional<Color> color_from(const std::string& w)
{
    for (int i = 0; i < kNumColors; ++i)
        if (kColorNames[i] == w)
            return static_cast<Color>(i + 1);
    return std::nullopt;
}

std::optional<Shape> shape_from(const std::string& w)
{
    for (int i = 0; i < kNumShapes; ++i)
        if (kShapeNames[i] == w)
            return static_cast<Shape>(i + 1);
    return std::nullopt;
}

}  // namespace

Concept shape_concept(Shape s) { return shape_index(s); }
Concept color_concept(Color c) { return kNumShapes + color_index(c); }
Concept composite_concept(Color c, Shape s)
{
    return kNumShapes + kNumColors + color_index(c) * kNumShapes + shape_index(s);
}
Concept position_concept(int cell) { return kNumShapes + kNumColors + kNumShapes * kNumColors + cell; }

std::string shape_name(Shape s) { return s == Shape::Empty ? "empty" : kShapeNames[shape_index(s)]; }
std::string color_name(Color c) { return c == Color::None ? "none" : kColorNames[color_index(c)]; }
std::string position_name(int cell) { return kPositionNames.at(cell); }

std::string concept_name(Concept c)
{
    if (c < 0 || c >= kNumConcepts)
        throw PreconditionError("concept id out of range");
    if (c < kNumShapes)
        return kShapeNames[c];
    c -= kNumShapes;
    if (c < kNumColors)
        return kColorNames[c];
    c -= kNumColors;
    if (c < kNumShapes * kNumColors)
        return kColorNames[c / kNumShapes] + " " + kShapeNames[c % kNumShapes];
    c -= kNumShapes * kNumColors;
    return kPositionNames[c];
}

std::vector<std::string> concept_words(Concept c) { return split_words(concept_name(c)); }

int SynthImage::non_empty_cells() const
{
    return static_cast<int>(std::count_if(grid.begin(), grid.end(), [](auto& c) { return !c.empty(); }));
}

std::vector<float> render(const Grid& grid)
{
    std::vector<float> px(kNumPixelValues, 1.0f);
    for (int cell = 0; cell < kNumCells; ++cell) {
        const auto& c = grid[cell];
        if (c.empty())
            continue;
        const auto& rgb = kPalette[color_index(c.color)];
        int oy = (cell / kGridSide) * kCellPixels, ox = (cell % kGridSide) * kCellPixels;
        for (int y = 0; y < kCellPixels; ++y)
            for (int x = 0; x < kCellPixels; ++x)
                if (glyph_mask(c.shape, y, x))
                    for (int ch = 0; ch < kChannels; ++ch)
                        px[((oy + y) * kImageSide + ox + x) * kChannels + ch] = rgb[ch];
    }
    return px;
}

ConceptSet concepts_of(const Grid& grid)
{
    ConceptSet s;
    for (int cell = 0; cell < kNumCells; ++cell) {
        const auto& c = grid[cell];
        if (c.empty())
            continue;
        s.set(shape_concept(c.shape));
        s.set(color_concept(c.color));
        s.set(composite_concept(c.color, c.shape));
        s.set(position_concept(cell));
    }
    return s;
}

SynthImage image_from_grid(const Grid& grid)
{
    SynthImage img;
    img.grid = grid;
    img.pixels = render(grid);
    img.concepts = concepts_of(grid);
    return img;
}

SynthImage gen_image(std::uint64_t seed, double density)
{
    if (!(density > 0.0 && density <= 1.0))
        throw PreconditionError("density must be in (0, 1]");
    Rng rng(derive_seed(seed, "image"));
    Grid grid{};
    bool any = false;
    while (!any) {
        for (auto& c : grid) {
            c = CellContent{};
            if (uniform01(rng) < density) {
                c.shape = static_cast<Shape>(1 + uniform_index(rng, kNumShapes));
                c.color = static_cast<Color>(1 + uniform_index(rng, kNumColors));
                any = true;
            }
        }
    }
    auto img = image_from_grid(grid);
    img.seed = seed;
    img.density = density;
    return img;
}

std::string caption_of(const SynthImage& image, std::uint64_t rng_seed)
{
    std::vector<int> cells;
    for (int k = 0; k < kNumCells; ++k)
        if (!image.grid[k].empty())
            cells.push_back(k);
    if (cells.empty())
        throw PreconditionError("caption_of: image has no content");
    Rng rng(derive_seed(rng_seed, "caption"));
    const std::uint64_t subsets = (1ull << cells.size()) - 1;
    const std::uint64_t mask = 1 + static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(subsets));
    std::vector<std::string> clauses;
    for (std::size_t i = 0; i < cells.size(); ++i)
        if (mask & (1ull << i))
            clauses.push_back(clause(image.grid[cells[i]], cells[i]));
    return join_clauses(clauses);
}

std::string full_description(const SynthImage& image)
{
    std::vector<std::string> clauses;
    for (int k = 0; k < kNumCells; ++k)
        if (!image.grid[k].empty())
            clauses.push_back(clause(image.grid[k], k));
    if (clauses.empty())
        throw PreconditionError("full_description: image has no content");
    return join_clauses(clauses);
}

QAPair gen_qa(const SynthImage& image, std::uint64_t rng_seed)
{
    Rng rng(derive_seed(rng_seed, "qa"));
    for (;;) {
        switch (uniform_index(rng, 3)) {
        case 0: {
            int cell = static_cast<int>(uniform_index(rng, kNumCells));
            const auto& c = image.grid[cell];
            if (c.empty())
                continue;
            return {QuestionKind::ShapeAt, "What shape is at " + position_name(cell) + "?",
                    "a " + color_name(c.color) + " " + shape_name(c.shape)};
        }
        case 1: {
            auto shape = static_cast<Shape>(1 + uniform_index(rng, kNumShapes));
            int count = 0;
            Color color = Color::None;
            for (const auto& c : image.grid)
                if (c.shape == shape) {
                    ++count;
                    color = c.color;
                }
            if (count != 1)
                continue;
            return {QuestionKind::ColorOf, "What color is the " + shape_name(shape) + "?", color_name(color)};
        }
        default:
            return {QuestionKind::Describe, "Describe the image.", full_description(image)};
        }
    }
}

std::optional<ConceptSet> parse_concepts(const std::string& text)
{
    auto w = split_words(text);
    if (!w.empty() && w.back() == ".")
        w.pop_back();
    if (w.empty())
        return std::nullopt;
    ConceptSet s;
    if (w.size() == 1) {
        auto c = color_from(w[0]);
        if (!c)
            return std::nullopt;
        s.set(color_concept(*c));
        return s;
    }
    std::size_t i = 0;
    while (i < w.size()) {
        if (i + 3 > w.size() || w[i] != "a")
            return std::nullopt;
        auto color = color_from(w[i + 1]);
        auto shape = shape_from(w[i + 2]);
        if (!color || !shape)
            return std::nullopt;
        s.set(color_concept(*color));
        s.set(shape_concept(*shape));
        s.set(composite_concept(*color, *shape));
        i += 3;
        if (i == w.size())
            break;
        if (w[i] != "at")
            return std::nullopt;
        ++i;
        std::optional<int> cell;
        for (int k = 0; k < kNumCells && !cell; ++k) {
            auto pw = split_words(kPositionNames[k]);
            if (i + pw.size() <= w.size() && std::equal(pw.begin(), pw.end(), w.begin() + static_cast<long>(i)))
                cell = k;
        }
        if (!cell)
            return std::nullopt;
        s.set(position_concept(*cell));
        i += split_words(kPositionNames[*cell]).size();
        if (i == w.size())
            break;
        if (w[i] != "and")
            return std::nullopt;
        ++i;
        if (i == w.size())
            return std::nullopt;
    }
    return s;
}

std::string caption_instruction(std::uint64_t rng_seed)
{
    Rng rng(derive_seed(rng_seed, "instruction"));
    return pick(kCaptionInstructions, rng);
}

MMExample make_caption_example(std::uint64_t image_seed, double density, std::uint64_t text_seed)
{
    MMExample ex;
    ex.image = gen_image(image_seed, density);
    ex.caption = caption_of(ex.image, text_seed);
    ex.instruction = caption_instruction(text_seed);
    ex.answer = ex.caption;
    return ex;
}

MMExample make_qa_example(std::uint64_t image_seed, double density, std::uint64_t text_seed)
{
    MMExample ex;
    ex.image = gen_image(image_seed, density);
    auto qa = gen_qa(ex.image, text_seed);
    ex.instruction = qa.instruction;
    ex.answer = qa.answer;
    return ex;
}

std::string filler_sentence(std::uint64_t rng_seed)
{
    Rng rng(derive_seed(rng_seed, "filler"));
    auto color = [&] { return kColorNames[uniform_index(rng, kNumColors)]; };
    auto shape = [&] { return kShapeNames[uniform_index(rng, kNumShapes)]; };
    auto noun = [&] { return pick(kNouns, rng); };
    auto subj = [&] { return pick(kSubjects, rng); };
    switch (uniform_index(rng, 13)) {
    case 0: {
        auto s = subj();
        auto v = pick(kVerbs, rng);
        auto c = color();
        return s + " " + v + " a " + c + " " + noun() + ".";
    }
    case 1: {
        auto n = noun();
        return "the " + n + " was " + color() + ".";
    }
    case 2:
        return "my favorite color is " + color() + ".";
    case 3: {
        auto s = subj();
        return s + " drew a " + shape() + " on the paper.";
    }
    case 4:
        return kShapeFacts[uniform_index(rng, kNumShapes)];
    case 5:
        return subj() + " sat in the center of the room.";
    case 6: {
        auto a = noun();
        auto side = pick(kSides, rng);
        return "the " + a + " is on the " + side + " side of the " + noun() + ".";
    }
    case 7: {
        auto s = subj();
        return s + " lives in the " + pick(kRegions, rng) + " part of the town.";
    }
    case 8:
        return subj() + " looked at the stars in the night sky.";
    case 9:
        return "the picture shown on the wall is old.";
    case 10:
        if (uniform01(rng) < 0.5)
            return "the sky is blue and the grass is green.";
        return subj() + " asked: " + pick(kCaptionInstructions, rng);
    case 11: {
        auto s = subj();
        auto v = pick(kVerbs, rng);
        auto a = noun();
        return s + " " + v + " the " + a + " and the " + noun() + ".";
    }
    default: {
        auto n = noun();
        return std::string(kConsiderPrefix) + "the " + n + " is " + color() + ".";
    }
    }
}

const std::vector<std::string>& grammar_words()
{
    static const std::vector<std::string> words = [] {
        std::set<std::string> s;
        auto add = [&](const std::string& text) {
            for (auto& w : split_words(text))
                s.insert(w);
        };
        for (auto& x : kShapeNames) add(x);
        for (auto& x : kColorNames) add(x);
        for (auto& x : kPositionNames) add(x);
        for (auto& x : kCaptionInstructions) add(x);
        for (auto& x : kSubjects) add(x);
        for (auto& x : kVerbs) add(x);
        for (auto& x : kNouns) add(x);
        for (auto& x : kShapeFacts) add(x);
        for (auto& x : kRegions) add(x);
        add("a at and .");
        add("What shape is at? What color is the? Describe the image.");
        add(kConsiderPrefix);
        add("the was. my favorite color is. drew a on the paper. sat in the center of the room.");
        add("is on the side of the. lives in the part of the town.");
        add("looked at the stars in the night sky. the picture shown on the wall is old.");
        add("the sky is blue and the grass is green. asked:");
        return std::vector<std::string>(s.begin(), s.end());
    }();
    return words;
}

std::string render_qa_text(const SynthImage& image, const QAPair& qa)
{
    return full_description(image) + " <sep> " + qa.instruction + " <sep> " + qa.answer;
}

nlohmann::json DatasetRecord::to_json() const
{
    nlohmann::json j;
    j["kind"] = kind;
    j["image_seed"] = image_seed ? nlohmann::json(*image_seed) : nlohmann::json(nullptr);
    j["density"] = density ? nlohmann::json(*density) : nlohmann::json(nullptr);
    if (kind == "mm" || kind == "qa") {
        j["instruction"] = instruction;
        j["answer"] = answer;
    }
    if (kind != "mm")
        j["text"] = text;
    return j;
}

DatasetRecord DatasetRecord::from_json(const nlohmann::json& j)
{
    DatasetRecord r;
    r.kind = j.at("kind").get<std::string>();
    if (r.kind != "caption" && r.kind != "qa" && r.kind != "filler" && r.kind != "mm")
        throw FormatError("unknown record kind '" + r.kind + "'");
    if (j.contains("image_seed") && !j["image_seed"].is_null())
        r.image_seed = j["image_seed"].get<std::uint64_t>();
    if (j.contains("density") && !j["density"].is_null())
        r.density = j["density"].get<double>();
    r.text = j.value("text", "");
    r.instruction = j.value("instruction", "");
    r.answer = j.value("answer", "");
    return r;
}

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot write dataset " + path.string());
    for (const auto& r : records)
        out << r.to_json().dump() << '\n';
    if (!out)
        throw Error("write failed for dataset " + path.string());
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open dataset " + path.string());
    std::vector<DatasetRecord> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            out.push_back(DatasetRecord::from_json(nlohmann::json::parse(line)));
    return out;
}

std::vector<DatasetRecord> text_corpus_records(std::size_t n, std::uint64_t seed, double density)
{
    if (n == 0)
        throw PreconditionError("corpus size must be >= 1");
    std::vector<DatasetRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = derive_seed(seed, i);
        Rng rng(derive_seed(s, "kind"));
        const double u = uniform01(rng);
        DatasetRecord r;
        if (u < 0.3) {
            auto img = gen_image(s, density);
            r.kind = "caption";
            r.image_seed = s;
            r.density = density;
            r.text = caption_of(img, s);
        } else if (u < 0.7) {
            auto img = gen_image(s, density);
            auto qa = gen_qa(img, s);
            r.kind = "qa";
            r.image_seed = s;
            r.density = density;
            r.instruction = qa.instruction;
            r.answer = qa.answer;
            r.text = render_qa_text(img, qa);
        } else {
            r.kind = "filler";
            r.text = filler_sentence(s);
        }
        out.push_back(std::move(r));
    }
    return out;
}

void build_text_corpus(std::size_t n, std::uint64_t seed, double density, const std::filesystem::path& out)
{
    write_dataset(out, text_corpus_records(n, seed, density));
}

std::vector<DatasetRecord> mm_records(std::size_t n, std::uint64_t seed, double density, bool captions)
{
    std::vector<DatasetRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = derive_seed(seed, i);
        auto ex = captions ? make_caption_example(s, density, s) : make_qa_example(s, density, s);
        DatasetRecord r;
        r.kind = "mm";
        r.image_seed = s;
        r.density = density;
        r.instruction = ex.instruction;
        r.answer = ex.answer;
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<DatasetRecord> description_records(std::size_t n, std::uint64_t seed, double density)
{
    std::vector<DatasetRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = derive_seed(seed, i);
        DatasetRecord r;
        r.kind = "caption";
        r.image_seed = s;
        r.density = density;
        r.text = full_description(gen_image(s, density));
        out.push_back(std::move(r));
    }
    return out;
}

MMExample example_from_record(const DatasetRecord& r)
{
    if (!r.image_seed || !r.density)
        throw FormatError("record has no image");
    MMExample ex;
    ex.image = gen_image(*r.image_seed, *r.density);
    ex.instruction = r.instruction;
    ex.answer = r.answer;
    if (r.kind == "caption")
        ex.caption = r.text;
    return ex;
}

}  // namespace xmp
