from uwadv.cli import main

main()
