#include "mstr/serialize.h"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace mstr {

namespace {

// The container is defined little-endian; this implementation writes host
// byte order directly and targets little-endian hosts (checked at startup of
// the writer rather than carrying swap paths nobody exercises).
void check_host_endianness() {
    const uint32_t probe = 1;
    uint8_t first;
    std::memcpy(&first, &probe, 1);
    check(first == 1, "tensor-table io requires a little-endian host");
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
  public:
    Reader(std::string bytes, std::string path)
        : bytes_(std::move(bytes)), path_(std::move(path)) {}

    template <typename T>
    T take() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string take_bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void read_at(uint64_t offset, void* dst, size_t n, const char* what) {
        if (offset > bytes_.size() || n > bytes_.size() - offset) {
            throw IoError("truncated tensor table '" + path_ + "': " + what +
                          " extends past end of file");
        }
        std::memcpy(dst, bytes_.data() + offset, n);
    }

    size_t size() const { return bytes_.size(); }

  private:
    void need(size_t n, const char* what = "record") {
        if (pos_ + n > bytes_.size()) {
            throw IoError("truncated tensor table '" + path_ + "': " + what +
                          " extends past end of file");
        }
    }

    std::string bytes_;
    std::string path_;
    size_t pos_ = 0;
};

}  // namespace

const Tensor* TensorTable::find(const std::string& name) const {
    for (const auto& [n, t] : items) {
        if (n == name) return &t;
    }
    return nullptr;
}

void write_tensor_table(const std::string& path, const char magic[4],
                        const TensorTable& table) {
    check_host_endianness();

    // Header and records first, into memory, so payload offsets are exact.
    std::string head;
    head.append(magic, 4);
    put<uint32_t>(head, table.version);
    put<uint64_t>(head, table.step);
    put<uint32_t>(head, static_cast<uint32_t>(table.items.size()));

    size_t records_size = 0;
    for (const auto& [name, t] : table.items) {
        check(t.defined(), "write_tensor_table: undefined tensor '" + name + "'");
        records_size += 4 + name.size() + 1 + 4 + 8 * t.shape().size() + 8;
    }
    uint64_t payload_at = head.size() + records_size + 8 + table.text.size();

    for (const auto& [name, t] : table.items) {
        put<uint32_t>(head, static_cast<uint32_t>(name.size()));
        head.append(name);
        put<uint8_t>(head, static_cast<uint8_t>(t.dtype()));
        put<uint32_t>(head, static_cast<uint32_t>(t.shape().size()));
        for (int64_t e : t.shape()) put<int64_t>(head, e);
        put<uint64_t>(head, payload_at);
        payload_at += static_cast<uint64_t>(t.numel()) * dtype_size(t.dtype());
    }
    put<uint64_t>(head, table.text.size());
    head.append(table.text);

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(head.data(), static_cast<std::streamsize>(head.size()));
        for (const auto& [name, t] : table.items) {
            size_t bytes = static_cast<size_t>(t.numel()) * dtype_size(t.dtype());
            const char* src = t.dtype() == Dtype::f64
                                  ? reinterpret_cast<const char*>(t.f64())
                                  : reinterpret_cast<const char*>(t.f32());
            out.write(src, static_cast<std::streamsize>(bytes));
        }
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
    }
}

TensorTable read_tensor_table(const std::string& path, const char magic[4]) {
    check_host_endianness();

    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(std::move(bytes), path);

    std::string got = r.take_bytes(4, "magic");
    if (std::memcmp(got.data(), magic, 4) != 0) {
        throw IoError("'" + path + "' is not a " + std::string(magic, 4) +
                      " file (magic '" + got + "')");
    }
    TensorTable table;
    table.version = r.take<uint32_t>();
    if (table.version != kTensorTableVersion) {
        throw IoError("'" + path + "': unsupported format version " +
                      std::to_string(table.version) + " (expected " +
                      std::to_string(kTensorTableVersion) + ")");
    }
    table.step = r.take<uint64_t>();
    uint32_t count = r.take<uint32_t>();

    struct Rec {
        std::string name;
        Dtype dtype;
        std::vector<int64_t> shape;
        uint64_t offset;
    };
    std::vector<Rec> recs;
    recs.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Rec rec;
        uint32_t name_len = r.take<uint32_t>();
        rec.name = r.take_bytes(name_len, "tensor name");
        uint8_t code = r.take<uint8_t>();
        if (code > 1) {
            throw IoError("'" + path + "': tensor '" + rec.name + "' has unknown dtype code " +
                          std::to_string(code));
        }
        rec.dtype = static_cast<Dtype>(code);
        uint32_t rank = r.take<uint32_t>();
        for (uint32_t d = 0; d < rank; ++d) {
            int64_t e = r.take<int64_t>();
            if (e <= 0) {
                throw IoError("'" + path + "': tensor '" + rec.name +
                              "' has non-positive extent");
            }
            rec.shape.push_back(e);
        }
        rec.offset = r.take<uint64_t>();
        recs.push_back(std::move(rec));
    }
    uint64_t text_len = r.take<uint64_t>();
    table.text = r.take_bytes(text_len, "text block");

    for (auto& rec : recs) {
        Tensor t = Tensor::zeros(rec.shape.empty() ? std::vector<int64_t>{1} : rec.shape,
                                 rec.dtype);
        if (rec.shape.empty()) t = t.reshaped({1});
        size_t n = static_cast<size_t>(t.numel()) * dtype_size(rec.dtype);
        void* dst = rec.dtype == Dtype::f64 ? static_cast<void*>(t.f64())
                                            : static_cast<void*>(t.f32());
        r.read_at(rec.offset, dst, n, ("payload of '" + rec.name + "'").c_str());
        table.items.emplace_back(std::move(rec.name), std::move(t));
    }
    return table;
}

}  // namespace mstr
