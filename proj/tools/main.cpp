#include <cstdio>

int main() {
    std::puts("sadkit: cli not wired yet");
    return 2;
}
