#include "xmp/tensor_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "xmp/error.hpp"

namespace xmp {

namespace {

constexpr char kMagic[4] = {'X', 'M', 'P', 'T'};
constexpr std::size_t kHashBytes = 32;

class Writer {
public:
    void raw(const void* p, std::size_t n)
    {
        auto b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    template <typename T>
    void le(T v)
    {
        static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
        std::uint8_t buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big)
            std::reverse(buf, buf + sizeof(T));
        raw(buf, sizeof(T));
    }
    void str(const std::string& s)
    {
        le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

    void raw(void* dst, std::size_t n)
    {
        if (pos_ + n > n_)
            throw FormatError("truncated tensor file");
        std::memcpy(dst, p_ + pos_, n);
        pos_ += n;
    }
    template <typename T>
    T le()
    {
        std::uint8_t buf[sizeof(T)];
        raw(buf, sizeof(T));
        if constexpr (std::endian::native == std::endian::big)
            std::reverse(buf, buf + sizeof(T));
        T v;
        std::memcpy(&v, buf, sizeof(T));
        return v;
    }
    std::string str()
    {
        auto n = le<std::uint32_t>();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    bool done() const { return pos_ == n_; }

private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

}  // namespace

const MatF& TensorFile::at(const std::string& name) const
{
    for (auto& [n, t] : tensors)
        if (n == name)
            return t;
    throw FormatError("no tensor named '" + name + "'");
}

bool TensorFile::contains(const std::string& name) const
{
    return std::any_of(tensors.begin(), tensors.end(), [&](auto& t) { return t.first == name; });
}

std::vector<std::uint8_t> serialize(const TensorFile& file)
{
    Writer w;
    w.raw(kMagic, 4);
    w.le<std::uint32_t>(kTensorFormatVersion);
    w.str(file.config.dump());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(file.tensors.size()));
    for (auto& [name, t] : file.tensors) {
        w.str(name);
        w.le<std::uint32_t>(2);
        w.le<std::uint64_t>(static_cast<std::uint64_t>(t.rows()));
        w.le<std::uint64_t>(static_cast<std::uint64_t>(t.cols()));
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j)
                w.le<float>(t(i, j));
    }
    auto digest = sha256_hex(w.out);
    for (std::size_t i = 0; i < kHashBytes; ++i)
        w.out.push_back(static_cast<std::uint8_t>(std::stoi(digest.substr(2 * i, 2), nullptr, 16)));
    return std::move(w.out);
}

TensorFile deserialize(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < 4 + kHashBytes)
        throw FormatError("tensor file too short");
    std::size_t body = bytes.size() - kHashBytes;
    std::ostringstream trailer;
    for (std::size_t i = body; i < bytes.size(); ++i)
        trailer << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(bytes[i]);
    if (trailer.str() != sha256_hex(bytes.data(), body))
        throw FormatError("tensor file content hash mismatch");

    Reader r(bytes.data(), body);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic");
    auto version = r.le<std::uint32_t>();
    if (version != kTensorFormatVersion)
        throw FormatError("unsupported tensor file version " + std::to_string(version));

    TensorFile f;
    f.config = nlohmann::json::parse(r.str());
    auto count = r.le<std::uint32_t>();
    for (std::uint32_t k = 0; k < count; ++k) {
        auto name = r.str();
        auto rank = r.le<std::uint32_t>();
        if (rank < 1 || rank > 2)
            throw FormatError("unsupported rank " + std::to_string(rank) + " for '" + name + "'");
        std::uint64_t rows = 1, cols = r.le<std::uint64_t>();
        if (rank == 2) {
            rows = cols;
            cols = r.le<std::uint64_t>();
        }
        MatF t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j)
                t(i, j) = r.le<float>();
        f.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done())
        throw FormatError("trailing bytes in tensor file");
    return f;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error("write failed for " + path.string());
}

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file)
{
    write_bytes(path, serialize(file));
}

TensorFile load_tensor_file(const std::filesystem::path& path)
{
    return deserialize(read_bytes(path));
}

std::string sha256_hex(const void* data, std::size_t size)
{
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i)
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes)
{
    return sha256_hex(bytes.data(), bytes.size());
}

std::string sha256_file(const std::filesystem::path& path)
{
    return sha256_hex(read_bytes(path));
}

}  // namespace xmp
