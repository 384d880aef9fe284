#pragma once

// Procedural closed world: 3x3 grid scenes of colored glyphs, their rendered
// pixels, ground-truth concept sets, captions, QA pairs and a text corpus.

#include <array>
#include <bitset>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace xmp {

enum class Shape : std::uint8_t { Empty, Circle, Square, Triangle, Star };
enum class Color : std::uint8_t { None, Red, Green, Blue, Yellow };

inline constexpr int kGridSide = 3;
inline constexpr int kNumCells = kGridSide * kGridSide;
inline constexpr int kCellPixels = 8;
inline constexpr int kImageSide = kGridSide * kCellPixels;
inline constexpr int kChannels = 3;
inline constexpr int kNumPixelValues = kImageSide * kImageSide * kChannels;

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 4;

struct CellContent {
    Shape shape = Shape::Empty;
    Color color = Color::None;

    bool empty() const { return shape == Shape::Empty; }
    friend bool operator==(const CellContent&, const CellContent&) = default;
};

using Grid = std::array<CellContent, kNumCells>;

// Concept atoms: 4 shapes, 4 colors, 16 color+shape composites, 9 positions.
inline constexpr int kNumConcepts = 33;
using Concept = int;
using ConceptSet = std::bitset<kNumConcepts>;

Concept shape_concept(Shape s);
Concept color_concept(Color c);
Concept composite_concept(Color c, Shape s);
Concept position_concept(int cell);

/// Human-readable phrase of a concept, e.g. "red circle" or "upper left".
std::string concept_name(Concept c);
/// Space-separated words a text must contain contiguously to mention `c`.
std::vector<std::string> concept_words(Concept c);

std::string shape_name(Shape s);
std::string color_name(Color c);
std::string position_name(int cell);

struct SynthImage {
    Grid grid{};
    std::vector<float> pixels;  // row-major [y][x][channel], values in [0, 1]
    ConceptSet concepts;
    std::uint64_t seed = 0;
    double density = 0.0;

    float pixel(int y, int x, int ch) const { return pixels[(y * kImageSide + x) * kChannels + ch]; }
    int non_empty_cells() const;
};

/// Renders flat-colored glyphs on white, one 8x8 block per grid cell.
std::vector<float> render(const Grid& grid);
ConceptSet concepts_of(const Grid& grid);
SynthImage image_from_grid(const Grid& grid);

/// Each cell independently non-empty with probability `density`; an all-empty
/// draw is redrawn. Requires 0 < density <= 1.
SynthImage gen_image(std::uint64_t seed, double density);

/// "a <color> <shape> at <position>" clauses for a non-empty subset of cells,
/// drawn uniformly among all non-empty subsets, in row-major order.
std::string caption_of(const SynthImage& image, std::uint64_t rng_seed);
/// Caption naming every non-empty cell.
std::string full_description(const SynthImage& image);

enum class QuestionKind { ShapeAt, ColorOf, Describe };

struct QAPair {
    QuestionKind kind = QuestionKind::Describe;
    std::string instruction;
    std::string answer;
};

QAPair gen_qa(const SynthImage& image, std::uint64_t rng_seed);

/// Inverse of the caption grammar: concepts named by a caption or an answer.
/// Returns nullopt when the text is not in the grammar.
std::optional<ConceptSet> parse_concepts(const std::string& text);

/// Instruction used for caption-style (stage 1) examples.
std::string caption_instruction(std::uint64_t rng_seed);

/// A multimodal example; the image is regenerated from (image_seed, density).
struct MMExample {
    SynthImage image;
    std::string caption;  // may be empty for QA examples
    std::string instruction;
    std::string answer;
};

MMExample make_caption_example(std::uint64_t image_seed, double density, std::uint64_t text_seed);
MMExample make_qa_example(std::uint64_t image_seed, double density, std::uint64_t text_seed);

/// Filler sentence using concept words in non-visual contexts.
std::string filler_sentence(std::uint64_t rng_seed);

/// Every word the generators can emit, sorted and unique.
const std::vector<std::string>& grammar_words();

// Dataset files: one JSON object per line.
//   {"kind": "caption"|"qa"|"filler"|"mm", "image_seed": int|null,
//    "density": float|null, "text": ..., "instruction": ..., "answer": ...}
struct DatasetRecord {
    std::string kind;
    std::optional<std::uint64_t> image_seed;
    std::optional<double> density;
    std::string text;
    std::string instruction;
    std::string answer;

    nlohmann::json to_json() const;
    static DatasetRecord from_json(const nlohmann::json& j);
};

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path);

/// Text-only corpus records: captions, QA pairs rendered as text, fillers.
std::vector<DatasetRecord> text_corpus_records(std::size_t n, std::uint64_t seed, double density);
void build_text_corpus(std::size_t n, std::uint64_t seed, double density, const std::filesystem::path& out);

/// Multimodal records ("mm") of caption type (stage 1) or QA type (stage 2).
std::vector<DatasetRecord> mm_records(std::size_t n, std::uint64_t seed, double density, bool captions);
MMExample example_from_record(const DatasetRecord& r);
/// "caption" records whose text names every non-empty cell (contrastive data).
std::vector<DatasetRecord> description_records(std::size_t n, std::uint64_t seed, double density);

/// Text used for the LM when a QA record is rendered without an image.
std::string render_qa_text(const SynthImage& image, const QAPair& qa);

}  // namespace xmp
