#include <stdio.h>
#include <assert.h>

static int divide(int num, int den) {
    assert(den != 0);
    return num / den;
}

int main(void) {
    int num = 6;
    int den = 0;
    int ratio = divide(num, den);
    printf("RESULT:%d\n", ratio);
    return 0;
}
